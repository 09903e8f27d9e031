//! Deterministic synthetic water-scene corpus: flat-shaded objects around a
//! waterline over textured water, exact ground-truth masks, radar returns
//! with clutter/mislocation/dropout noise, and adverse-weather image
//! corruptions.
//!
//! Two properties drive the evaluation design: some class pairs share a hue
//! family (their colors blend into each other under `hue_overlap`), while
//! radar cross-section and Doppler are strongly class-separable — so radar
//! carries class evidence the camera alone cannot recover, and corrupting
//! the image only widens that gap.

use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::image::{write_atomic, Image};
use crate::mask_ops::{read_maskstack, write_maskstack, MaskStack};
use crate::radar::{
    back_project, read_radar_txt, write_radar_txt, CameraModel, RadarFrame, RadarPoint,
};
use crate::scalar::Scalar;

/// Seven object classes between a background channel (index 0) and a water
/// channel (last index).
pub fn class_legend() -> Vec<String> {
    ["background", "pier", "buoy", "sailor", "ship", "boat", "vessel", "kayak", "water"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub const N_CLASSES: usize = 9;

/// Flat-shade base color per class.
pub fn base_color(class: usize) -> [f64; 3] {
    match class {
        0 => [0.72, 0.78, 0.84], // background sky
        1 => [0.45, 0.30, 0.15], // pier
        2 => [0.85, 0.15, 0.10], // buoy
        3 => [0.90, 0.45, 0.10], // sailor
        4 => [0.35, 0.35, 0.40], // ship
        5 => [0.62, 0.64, 0.68], // boat
        6 => [0.20, 0.50, 0.25], // vessel
        7 => [0.55, 0.60, 0.18], // kayak
        _ => [0.10, 0.25, 0.55], // water
    }
}

/// The class this class is visually confusable with. Pairs are symmetric;
/// at `hue_overlap = 1` both members render from their shared midpoint
/// color and only the radar signature separates them. Pier stays unpaired
/// as a camera-learnable baseline class.
pub fn hue_partner(class: usize) -> usize {
    match class {
        2 => 3, // buoy ↔ sailor (red-orange family)
        3 => 2,
        4 => 5, // ship ↔ boat (gray hulls)
        5 => 4,
        6 => 7, // vessel ↔ kayak (green-yellow family)
        7 => 6,
        other => other,
    }
}

/// Class-separable radar signature: (rcs mean dBsm, doppler mean m/s).
pub fn radar_signature(class: usize) -> (f64, f64) {
    (-12.0 + 3.5 * class as f64, -3.0 + 0.9 * class as f64)
}

pub const RCS_SIGMA: f64 = 2.5;
pub const DOPPLER_SIGMA: f64 = 0.6;

/// 8-bit palette for mask PNG exports.
pub fn class_palette() -> Vec<[u8; 3]> {
    (0..N_CLASSES)
        .map(|c| {
            let rgb = base_color(c);
            [
                (rgb[0] * 255.0).round() as u8,
                (rgb[1] * 255.0).round() as u8,
                (rgb[2] * 255.0).round() as u8,
            ]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub object_count: (usize, usize),
    pub waterline_frac: f64,
    /// How far object colors bleed toward their partner class (0 = fully
    /// distinct hues, 1 = indistinguishable).
    pub hue_overlap: f64,
    pub rng_seed: u64,
}

impl SceneConfig {
    /// Desk-scale default used by tests and the acceptance runs.
    pub fn desk(size: usize) -> Self {
        SceneConfig {
            width: size,
            height: size,
            object_count: (2, 5),
            waterline_frac: 0.45,
            hue_overlap: 0.85,
            rng_seed: 0,
        }
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::new(
            self.width as f64,
            self.width as f64,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::InvalidConfig {
                what: "scene config",
                why: format!("image size {}x{} not divisible by 16", self.width, self.height),
            });
        }
        if self.object_count.0 > self.object_count.1 {
            return Err(Error::InvalidConfig {
                what: "scene config",
                why: "object_count min > max".into(),
            });
        }
        if !(0.1..=0.9).contains(&self.waterline_frac) {
            return Err(Error::InvalidConfig {
                what: "scene config",
                why: "waterline_frac outside [0.1, 0.9]".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarNoiseConfig {
    /// Poisson mean of spurious water-surface returns per frame.
    pub clutter_rate: f64,
    /// Gaussian point displacement (meters), truncated at 3σ.
    pub mislocation_sigma: f64,
    /// Probability an object yields no radar returns at all.
    pub dropout_prob: f64,
    pub points_per_object: (usize, usize),
    /// Per-point spread around the class RCS signature (dBsm). Larger
    /// values mean more points are needed for a reliable class estimate.
    pub rcs_sigma: f64,
    /// Per-point spread around the class Doppler signature (m/s).
    pub doppler_sigma: f64,
}

impl Default for RadarNoiseConfig {
    fn default() -> Self {
        RadarNoiseConfig {
            clutter_rate: 6.0,
            mislocation_sigma: 0.25,
            dropout_prob: 0.1,
            points_per_object: (12, 30),
            rcs_sigma: RCS_SIGMA,
            doppler_sigma: DOPPLER_SIGMA,
        }
    }
}

impl RadarNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clutter_rate >= 0.0
            && self.mislocation_sigma >= 0.0
            && (0.0..=1.0).contains(&self.dropout_prob)
            && self.points_per_object.0 <= self.points_per_object.1
            && self.rcs_sigma >= 0.0
            && self.doppler_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                what: "radar noise config",
                why: format!("{self:?}"),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CorruptionMode {
    None,
    Fog,
    Droplets,
    Blur,
    StrongLight,
}

impl CorruptionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CorruptionMode::None),
            "fog" => Ok(CorruptionMode::Fog),
            "droplets" => Ok(CorruptionMode::Droplets),
            "blur" => Ok(CorruptionMode::Blur),
            "strong_light" => Ok(CorruptionMode::StrongLight),
            other => Err(Error::InvalidConfig {
                what: "corruption mode",
                why: format!("unknown mode `{other}`"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionMode::None => "none",
            CorruptionMode::Fog => "fog",
            CorruptionMode::Droplets => "droplets",
            CorruptionMode::Blur => "blur",
            CorruptionMode::StrongLight => "strong_light",
        }
    }

    pub fn all_adverse() -> Vec<CorruptionMode> {
        vec![
            CorruptionMode::Fog,
            CorruptionMode::Droplets,
            CorruptionMode::Blur,
            CorruptionMode::StrongLight,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionConfig {
    pub mode: CorruptionMode,
    pub severity: f64,
    pub rng_seed: u64,
}

impl CorruptionConfig {
    pub fn none() -> Self {
        CorruptionConfig {
            mode: CorruptionMode::None,
            severity: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.severity) {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                what: "corruption config",
                why: format!("severity {} outside [0,1]", self.severity),
            })
        }
    }
}

/// One corpus unit: image (corrupted, 8-bit-quantized), exact ground truth,
/// radar frame with labels, camera, corruption metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<F: Scalar> {
    pub index: usize,
    pub seed: u64,
    pub image: Image<F>,
    pub gt: MaskStack<F>,
    pub radar: RadarFrame,
    pub camera: CameraModel,
    pub corruption: CorruptionConfig,
}

impl<F: Scalar> Scene<F> {
    pub fn dir_name(&self) -> String {
        format!("{:04}", self.index)
    }
}

fn hash_unit(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(21) ^ c.rotate_left(42);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Debug)]
struct PlacedObject {
    class: usize,
    depth: f64,
    center_u: f64,
    center_v: f64,
    half_u: f64,
    half_v: f64,
    elliptical: bool,
    color: [f64; 3],
}

impl PlacedObject {
    fn covers(&self, u: usize, v: usize) -> bool {
        let du = (u as f64 + 0.5 - self.center_u) / self.half_u;
        let dv = (v as f64 + 0.5 - self.center_v) / self.half_v;
        if self.elliptical {
            du * du + dv * dv <= 1.0
        } else {
            du.abs() <= 1.0 && dv.abs() <= 1.0
        }
    }
}

/// Generate one scene: place objects around the waterline, render, emit
/// exact masks, synthesize labeled radar returns, corrupt the image only,
/// and quantize to the on-disk 8-bit grid.
pub fn generate_scene<F: Scalar>(
    scene_cfg: &SceneConfig,
    radar_cfg: &RadarNoiseConfig,
    corruption_cfg: &CorruptionConfig,
) -> Scene<F> {
    let (w, h) = (scene_cfg.width, scene_cfg.height);
    let camera = scene_cfg.camera();
    let v_wl = ((scene_cfg.waterline_frac * h as f64).floor() as usize).clamp(1, h - 2);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_cfg.rng_seed);

    // 1. layout
    let n_obj = rng.random_range(scene_cfg.object_count.0..=scene_cfg.object_count.1);
    let mut objects: Vec<PlacedObject> = (0..n_obj)
        .map(|_| {
            let class = rng.random_range(1..=7usize);
            let depth = 8.0 + rng.random::<f64>() * 20.0;
            let half_u = (0.06 + rng.random::<f64>() * 0.10) * w as f64;
            let half_v = (0.05 + rng.random::<f64>() * 0.09) * h as f64;
            let center_u = (0.12 + rng.random::<f64>() * 0.76) * w as f64;
            let bottom = v_wl as f64 + rng.random::<f64>() * 0.25 * h as f64;
            let center_v = (bottom - half_v).clamp(half_v, h as f64 - 1.0);
            let elliptical = rng.random::<f64>() < 0.5;
            // blend toward the pair midpoint; the jitter is symmetric, so a
            // fully-blended pair is indistinguishable in distribution
            let blend = 0.5 * scene_cfg.hue_overlap * (0.9 + 0.2 * rng.random::<f64>());
            let blend = blend.min(1.0);
            let own = base_color(class);
            let other = base_color(hue_partner(class));
            let color = [
                own[0] + (other[0] - own[0]) * blend,
                own[1] + (other[1] - own[1]) * blend,
                own[2] + (other[2] - own[2]) * blend,
            ];
            PlacedObject {
                class,
                depth,
                center_u,
                center_v,
                half_u,
                half_v,
                elliptical,
                color,
            }
        })
        .collect();
    // paint far to near, so nearer objects occlude
    objects.sort_by(|a, b| b.depth.partial_cmp(&a.depth).unwrap());

    // 2. instance and class maps
    let mut instance = vec![-1i64; w * h];
    let mut class_map = vec![0usize; w * h];
    for (idx, pix) in class_map.iter_mut().enumerate() {
        let v = idx / w;
        *pix = if v >= v_wl { N_CLASSES - 1 } else { 0 };
    }
    for (oi, obj) in objects.iter().enumerate() {
        for v in 0..h {
            for u in 0..w {
                if obj.covers(u, v) {
                    instance[v * w + u] = oi as i64;
                    class_map[v * w + u] = obj.class;
                }
            }
        }
    }

    // 3. render
    let mut image: Image<F> = Image::new(w, h);
    let tex_seed = scene_cfg.rng_seed ^ 0xA5A5_5A5A_DEAD_BEEF;
    let phase = hash_unit(tex_seed, 0, 0, 7) * std::f64::consts::TAU;
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            let rgb = if instance[idx] >= 0 {
                let obj = &objects[instance[idx] as usize];
                let local_v = (v as f64 + 0.5 - (obj.center_v - obj.half_v)) / (2.0 * obj.half_v);
                let shade = 0.96 + 0.08 * local_v.clamp(0.0, 1.0);
                let n = |ch: u64| (hash_unit(tex_seed, u as u64, v as u64, ch) - 0.5) * 0.02;
                [
                    obj.color[0] * shade + n(0),
                    obj.color[1] * shade + n(1),
                    obj.color[2] * shade + n(2),
                ]
            } else if class_map[idx] == N_CLASSES - 1 {
                let water = base_color(N_CLASSES - 1);
                let ripple = 1.0 + 0.06 * (v as f64 * 0.7 + u as f64 * 0.05 + phase).sin();
                let n = |ch: u64| (hash_unit(tex_seed, u as u64, v as u64, 10 + ch) - 0.5) * 0.02;
                [water[0] * ripple + n(0), water[1] * ripple + n(1), water[2] * ripple + n(2)]
            } else {
                let sky = base_color(0);
                let fade = 1.0 - 0.12 * (v as f64 / v_wl.max(1) as f64);
                let n = |ch: u64| (hash_unit(tex_seed, u as u64, v as u64, 20 + ch) - 0.5) * 0.02;
                [sky[0] * fade + n(0), sky[1] * fade + n(1), sky[2] * fade + n(2)]
            };
            image.set(u, v, [F::of_f64(rgb[0]), F::of_f64(rgb[1]), F::of_f64(rgb[2])]);
        }
    }

    // 4. ground truth (one-hot partition from the class map)
    let mut gt = MaskStack::zeros(class_legend(), h, w);
    for (idx, &c) in class_map.iter().enumerate() {
        gt.channel_mut(c)[idx] = F::one();
    }

    // 5. radar returns
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let visible: Vec<Vec<usize>> = (0..objects.len())
        .map(|oi| {
            instance
                .iter()
                .enumerate()
                .filter(|(_, &id)| id == oi as i64)
                .map(|(idx, _)| idx)
                .collect()
        })
        .collect();
    let rcs_noise = Normal::new(0.0, radar_cfg.rcs_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let dop_noise = Normal::new(0.0, radar_cfg.doppler_sigma.max(f64::MIN_POSITIVE)).unwrap();
    for (oi, obj) in objects.iter().enumerate() {
        if visible[oi].is_empty() {
            continue;
        }
        if rng.random::<f64>() < radar_cfg.dropout_prob {
            continue;
        }
        let count = rng.random_range(radar_cfg.points_per_object.0..=radar_cfg.points_per_object.1);
        let (rcs_mean, dop_mean) = radar_signature(obj.class);
        for _ in 0..count {
            let pix = visible[oi][rng.random_range(0..visible[oi].len())];
            let (pu, pv) = ((pix % w) as f64 + 0.5, (pix / w) as f64 + 0.5);
            let depth = (obj.depth + (rng.random::<f64>() - 0.5) * 0.4).max(1.0);
            let (x, y, z) = back_project(pu, pv, depth, &camera);
            let sigma = radar_cfg.mislocation_sigma;
            let trunc = |rng: &mut ChaCha8Rng| -> f64 {
                if sigma == 0.0 {
                    return 0.0;
                }
                Normal::new(0.0, sigma)
                    .unwrap()
                    .sample(rng)
                    .clamp(-3.0 * sigma, 3.0 * sigma)
            };
            let dx = trunc(&mut rng);
            let dy = trunc(&mut rng);
            points.push(RadarPoint {
                x: x + dx,
                y: y + dy,
                z,
                rcs: rcs_mean + rcs_noise.sample(&mut rng),
                doppler: dop_mean + dop_noise.sample(&mut rng),
            });
            labels.push(obj.class);
        }
    }
    // clutter on the water surface
    let clutter_count = if radar_cfg.clutter_rate > 0.0 {
        Poisson::new(radar_cfg.clutter_rate).unwrap().sample(&mut rng).round() as usize
    } else {
        0
    };
    for _ in 0..clutter_count {
        let mut placed = false;
        for _ in 0..8 {
            let u = rng.random_range(0..w);
            let v = rng.random_range(v_wl..h);
            if class_map[v * w + u] != N_CLASSES - 1 {
                continue;
            }
            let depth = 5.0 + rng.random::<f64>() * 35.0;
            let (x, y, z) = back_project(u as f64 + 0.5, v as f64 + 0.5, depth, &camera);
            points.push(RadarPoint {
                x,
                y,
                z,
                rcs: -18.0 + rcs_noise.sample(&mut rng) * 0.8,
                doppler: dop_noise.sample(&mut rng) * 2.0,
            });
            labels.push(N_CLASSES - 1);
            placed = true;
            break;
        }
        if !placed {
            continue;
        }
    }
    let radar = RadarFrame {
        frame_id: scene_cfg.rng_seed,
        points,
        labels: Some(labels),
    };

    // 6. corrupt the image only, then snap to the 8-bit grid
    let mut image = corrupt(&image, corruption_cfg);
    image.quantize();

    Scene {
        index: 0,
        seed: scene_cfg.rng_seed,
        image,
        gt,
        radar,
        camera,
        corruption: *corruption_cfg,
    }
}

/// Disc parameters (center u, center v, radius) the droplet corruption
/// uses for a given config and image size. Exposed so a rasterization
/// oracle can recompute the affected pixel set independently.
pub fn droplet_discs(cfg: &CorruptionConfig, width: usize, height: usize) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x0D0D_0D0D);
    let count = (cfg.severity * 8.0).round() as usize;
    let scale = width.min(height) as f64;
    (0..count)
        .map(|_| {
            let cu = rng.random::<f64>() * width as f64;
            let cv = rng.random::<f64>() * height as f64;
            let r = (0.05 + rng.random::<f64>() * 0.08) * scale * (0.6 + 0.8 * cfg.severity);
            (cu, cv, r)
        })
        .collect()
}

fn box_blur3<F: Scalar>(image: &Image<F>) -> Image<F> {
    let (w, h) = (image.width, image.height);
    let mut out = Image::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let mut acc = [0.0f64; 3];
            let mut n = 0.0;
            for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    let (nu, nv) = (u as i64 + du, v as i64 + dv);
                    if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                        continue;
                    }
                    let c = image.get(nu as usize, nv as usize);
                    for ch in 0..3 {
                        acc[ch] += c[ch].as_f64();
                    }
                    n += 1.0;
                }
            }
            out.set(
                u,
                v,
                [
                    F::of_f64(acc[0] / n),
                    F::of_f64(acc[1] / n),
                    F::of_f64(acc[2] / n),
                ],
            );
        }
    }
    out
}

/// Apply an adverse-weather corruption to the image. Ground truth and radar
/// are never touched; severity 0 is the identity for every mode.
pub fn corrupt<F: Scalar>(image: &Image<F>, cfg: &CorruptionConfig) -> Image<F> {
    let (w, h) = (image.width, image.height);
    let s = cfg.severity;
    match cfg.mode {
        CorruptionMode::None => image.clone(),
        CorruptionMode::Fog => {
            let mut out = image.clone();
            for v in 0..h {
                for u in 0..w {
                    let p = out.get(u, v);
                    out.set(
                        u,
                        v,
                        [
                            F::of_f64(p[0].as_f64() * (1.0 - s) + 0.5 * s),
                            F::of_f64(p[1].as_f64() * (1.0 - s) + 0.5 * s),
                            F::of_f64(p[2].as_f64() * (1.0 - s) + 0.5 * s),
                        ],
                    );
                }
            }
            out
        }
        CorruptionMode::Droplets => {
            let discs = droplet_discs(cfg, w, h);
            if discs.is_empty() {
                return image.clone();
            }
            let blurred = box_blur3(image);
            let mut out = image.clone();
            for (di, &(cu, cv, r)) in discs.iter().enumerate() {
                let tint = [
                    0.52 + hash_unit(cfg.rng_seed, di as u64, 0, 1) * 0.12,
                    0.56 + hash_unit(cfg.rng_seed, di as u64, 0, 2) * 0.12,
                    0.62 + hash_unit(cfg.rng_seed, di as u64, 0, 3) * 0.12,
                ];
                for v in 0..h {
                    for u in 0..w {
                        let du = u as f64 + 0.5 - cu;
                        let dv = v as f64 + 0.5 - cv;
                        if du * du + dv * dv > r * r {
                            continue;
                        }
                        let b = blurred.get(u, v);
                        out.set(
                            u,
                            v,
                            [
                                F::of_f64(b[0].as_f64() * 0.55 + tint[0] * 0.45),
                                F::of_f64(b[1].as_f64() * 0.55 + tint[1] * 0.45),
                                F::of_f64(b[2].as_f64() * 0.55 + tint[2] * 0.45),
                            ],
                        );
                    }
                }
            }
            out
        }
        CorruptionMode::Blur => {
            let sigma = 2.5 * s;
            let radius = (3.0 * sigma).ceil() as i64;
            if radius == 0 {
                return image.clone();
            }
            let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
            for k in -radius..=radius {
                kernel.push((-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp());
            }
            let norm: f64 = kernel.iter().sum();
            let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
            // horizontal then vertical pass, edge clamp
            let mut tmp: Vec<[f64; 3]> = vec![[0.0; 3]; w * h];
            for v in 0..h {
                for u in 0..w {
                    let mut acc = [0.0f64; 3];
                    for (ki, kw) in kernel.iter().enumerate() {
                        let nu = (u as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                        let c = image.get(nu, v);
                        for ch in 0..3 {
                            acc[ch] += kw * c[ch].as_f64();
                        }
                    }
                    tmp[v * w + u] = acc;
                }
            }
            let mut out = Image::new(w, h);
            for v in 0..h {
                for u in 0..w {
                    let mut acc = [0.0f64; 3];
                    for (ki, kw) in kernel.iter().enumerate() {
                        let nv = (v as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                        let c = tmp[nv * w + u];
                        for ch in 0..3 {
                            acc[ch] += kw * c[ch];
                        }
                    }
                    out.set(u, v, [F::of_f64(acc[0]), F::of_f64(acc[1]), F::of_f64(acc[2])]);
                }
            }
            out
        }
        CorruptionMode::StrongLight => {
            let angle = hash_unit(cfg.rng_seed, 1, 2, 3) * std::f64::consts::TAU;
            let (ca, sa) = (angle.cos(), angle.sin());
            let mut out = image.clone();
            for v in 0..h {
                for u in 0..w {
                    let g = ((u as f64 / w as f64 - 0.5) * ca + (v as f64 / h as f64 - 0.5) * sa
                        + 0.5)
                        .clamp(0.0, 1.0);
                    let p = out.get(u, v);
                    out.set(
                        u,
                        v,
                        [
                            F::of_f64((p[0].as_f64() + 0.9 * s * g).min(1.0)),
                            F::of_f64((p[1].as_f64() + 0.9 * s * g).min(1.0)),
                            F::of_f64((p[2].as_f64() + 0.9 * s * g).min(1.0)),
                        ],
                    );
                }
            }
            out
        }
    }
}

// ── Corpus ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig {
                what: "split",
                why: format!("unknown split `{other}`"),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub scene: SceneConfig,
    pub radar: RadarNoiseConfig,
    pub corruption_modes: Vec<CorruptionMode>,
    pub severity_range: (f64, f64),
    pub count: usize,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.radar.validate()?;
        if self.corruption_modes.is_empty() {
            return Err(Error::InvalidConfig {
                what: "corpus config",
                why: "need at least one corruption mode".into(),
            });
        }
        if self.count == 0 {
            return Err(Error::InvalidConfig {
                what: "corpus config",
                why: "count must be positive".into(),
            });
        }
        let (lo, hi) = self.severity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidConfig {
                what: "corpus config",
                why: "bad severity range".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus<F: Scalar> {
    pub legend: Vec<String>,
    pub camera: CameraModel,
    pub scenes: Vec<Scene<F>>,
    pub splits: Vec<Split>,
}

impl<F: Scalar> Corpus<F> {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

fn split_for(index: usize, count: usize) -> Split {
    // 70/20/10 by index
    let n_test = count / 10;
    let n_val = count * 2 / 10;
    let n_train = count - n_val - n_test;
    if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

fn mix_seed(seed: u64, index: u64, salt: u64) -> u64 {
    let mut x = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.rotate_left(33);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 31)
}

/// Generate a full corpus in memory; scene `i` is deterministic given
/// `(config, seed, i)`.
pub fn generate_corpus<F: Scalar>(cfg: &CorpusConfig) -> Result<Corpus<F>> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(cfg.count);
    let mut splits = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut pick = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i as u64, 1));
        let mode = cfg.corruption_modes[pick.random_range(0..cfg.corruption_modes.len())];
        let severity = if matches!(mode, CorruptionMode::None) {
            0.0
        } else {
            cfg.severity_range.0
                + pick.random::<f64>() * (cfg.severity_range.1 - cfg.severity_range.0)
        };
        let scene_cfg = SceneConfig {
            rng_seed: mix_seed(cfg.seed, i as u64, 2),
            ..cfg.scene
        };
        let corruption = CorruptionConfig {
            mode,
            severity,
            rng_seed: mix_seed(cfg.seed, i as u64, 3),
        };
        let mut scene = generate_scene::<F>(&scene_cfg, &cfg.radar, &corruption);
        scene.index = i;
        scenes.push(scene);
        splits.push(split_for(i, cfg.count));
    }
    Ok(Corpus {
        legend: class_legend(),
        camera: cfg.scene.camera(),
        scenes,
        splits,
    })
}

// ── Corpus directory layout ────────────────────────────────────────────
//
//   corpus/
//     manifest.txt
//     scenes/<id>/image.ppm
//     scenes/<id>/gt.maskstack
//     scenes/<id>/radar.txt

pub fn write_corpus<F: Scalar>(dir: &Path, corpus: &Corpus<F>) -> Result<()> {
    fs::create_dir_all(dir.join("scenes")).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# corpus-manifest v1\n");
    manifest.push_str(&format!("count {}\n", corpus.scenes.len()));
    manifest.push_str(&format!("legend {}\n", corpus.legend.join(",")));
    let cam = &corpus.camera;
    manifest.push_str(&format!(
        "camera fx={} fy={} cx={} cy={} width={} height={} z_min={}\n",
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.z_min
    ));
    for (scene, split) in corpus.scenes.iter().zip(corpus.splits.iter()) {
        manifest.push_str(&format!(
            "scene id={} seed={} split={} corruption={} severity={} corruption_seed={}\n",
            scene.dir_name(),
            scene.seed,
            split.name(),
            scene.corruption.mode.name(),
            scene.corruption.severity,
            scene.corruption.rng_seed,
        ));
        let scene_dir = dir.join("scenes").join(scene.dir_name());
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        scene.image.write_ppm(&scene_dir.join("image.ppm"))?;
        write_maskstack(&scene_dir.join("gt.maskstack"), &scene.gt)?;
        write_radar_txt(&scene_dir.join("radar.txt"), &scene.radar)?;
    }
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}

pub fn read_corpus<F: Scalar>(dir: &Path) -> Result<Corpus<F>> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let bad = |why: String| Error::format(&manifest_path, "manifest", why);
    let mut legend: Option<Vec<String>> = None;
    let mut camera: Option<CameraModel> = None;
    let mut scenes = Vec::new();
    let mut splits = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (head, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
        match head {
            "count" => {}
            "legend" => legend = Some(rest.split(',').map(|s| s.to_string()).collect()),
            "camera" => {
                let mut kv = std::collections::BTreeMap::new();
                for field in rest.split_whitespace() {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| bad(format!("bad camera field `{field}`")))?;
                    kv.insert(k.to_string(), v.to_string());
                }
                let get = |k: &str| -> Result<f64> {
                    kv.get(k)
                        .ok_or_else(|| bad(format!("camera missing `{k}`")))?
                        .parse()
                        .map_err(|_| bad(format!("bad camera value for `{k}`")))
                };
                let mut cam = CameraModel::new(
                    get("fx")?,
                    get("fy")?,
                    get("cx")?,
                    get("cy")?,
                    get("width")? as usize,
                    get("height")? as usize,
                );
                cam.z_min = get("z_min")?;
                camera = Some(cam);
            }
            "scene" => {
                let mut kv = std::collections::BTreeMap::new();
                for field in rest.split_whitespace() {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| bad(format!("bad scene field `{field}`")))?;
                    kv.insert(k.to_string(), v.to_string());
                }
                let get = |k: &str| -> Result<String> {
                    kv.get(k)
                        .cloned()
                        .ok_or_else(|| bad(format!("scene missing `{k}`")))
                };
                let id = get("id")?;
                let scene_dir = dir.join("scenes").join(&id);
                let image = Image::read_ppm(&scene_dir.join("image.ppm"))?;
                let gt = read_maskstack(&scene_dir.join("gt.maskstack"))?;
                let radar = read_radar_txt(&scene_dir.join("radar.txt"))?;
                let corruption = CorruptionConfig {
                    mode: CorruptionMode::parse(&get("corruption")?)?,
                    severity: get("severity")?
                        .parse()
                        .map_err(|_| bad("bad severity".into()))?,
                    rng_seed: get("corruption_seed")?
                        .parse()
                        .map_err(|_| bad("bad corruption_seed".into()))?,
                };
                splits.push(Split::parse(&get("split")?)?);
                scenes.push(Scene {
                    index: id.parse().map_err(|_| bad("bad scene id".into()))?,
                    seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
                    image,
                    gt,
                    radar,
                    camera: camera.ok_or_else(|| bad("scene before camera".into()))?,
                    corruption,
                });
            }
            other => return Err(bad(format!("unknown directive `{other}`"))),
        }
    }
    Ok(Corpus {
        legend: legend.ok_or_else(|| bad("missing legend".into()))?,
        camera: camera.ok_or_else(|| bad("missing camera".into()))?,
        scenes,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::project_point;

    fn desk_cfgs() -> (SceneConfig, RadarNoiseConfig, CorruptionConfig) {
        (
            SceneConfig { rng_seed: 11, ..SceneConfig::desk(64) },
            RadarNoiseConfig::default(),
            CorruptionConfig { mode: CorruptionMode::Fog, severity: 0.4, rng_seed: 5 },
        )
    }

    #[test]
    fn empty_scene_is_background_and_water_only() {
        let (mut sc, mut rc, _) = desk_cfgs();
        sc.object_count = (0, 0);
        rc.clutter_rate = 0.0;
        let scene: Scene<f64> = generate_scene(&sc, &rc, &CorruptionConfig::none());
        assert!(scene.radar.is_empty());
        let gt = &scene.gt;
        for c in 1..N_CLASSES - 1 {
            assert!(gt.channel(c).iter().all(|&v| v == 0.0));
        }
        // partition: background+water cover everything
        for i in 0..64 * 64 {
            let s: f64 = (0..N_CLASSES).map(|c| gt.channel(c)[i]).sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn severity_zero_corruption_is_identity_for_every_mode() {
        let (sc, rc, _) = desk_cfgs();
        let clean: Scene<f64> = generate_scene(&sc, &rc, &CorruptionConfig::none());
        for mode in CorruptionMode::all_adverse() {
            let cfg = CorruptionConfig { mode, severity: 0.0, rng_seed: 9 };
            let corrupted = corrupt(&clean.image, &cfg);
            assert_eq!(clean.image, corrupted, "{mode:?}");
        }
    }

    #[test]
    fn fog_severity_one_is_uniform_gray() {
        let (sc, rc, _) = desk_cfgs();
        let scene: Scene<f64> = generate_scene(&sc, &rc, &CorruptionConfig::none());
        let cfg = CorruptionConfig { mode: CorruptionMode::Fog, severity: 1.0, rng_seed: 0 };
        let foggy = corrupt(&scene.image, &cfg);
        for v in 0..64 {
            for u in 0..64 {
                for ch in foggy.get(u, v) {
                    assert!((ch - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fixed_seed_regenerates_bit_identical_scene() {
        let (sc, rc, cc) = desk_cfgs();
        let a: Scene<f64> = generate_scene(&sc, &rc, &cc);
        let b: Scene<f64> = generate_scene(&sc, &rc, &cc);
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_channels_partition_the_image() {
        let (sc, rc, cc) = desk_cfgs();
        let scene: Scene<f64> = generate_scene(&sc, &rc, &cc);
        let hw = 64 * 64;
        for i in 0..hw {
            let mut ones = 0;
            for c in 0..N_CLASSES {
                let v = scene.gt.channel(c)[i];
                assert!(v == 0.0 || v == 1.0);
                if v == 1.0 {
                    ones += 1;
                }
            }
            assert_eq!(ones, 1, "pixel {i} not a partition");
        }
    }

    #[test]
    fn object_points_project_inside_dilated_masks() {
        let (mut sc, mut rc, _) = desk_cfgs();
        rc.clutter_rate = 0.0;
        rc.dropout_prob = 0.0;
        for seed in 0..5 {
            sc.rng_seed = 100 + seed;
            let scene: Scene<f64> = generate_scene(&sc, &rc, &CorruptionConfig::none());
            let labels = scene.radar.labels.as_ref().unwrap();
            for (p, &label) in scene.radar.points.iter().zip(labels.iter()) {
                let proj = project_point(p, &scene.camera);
                if !proj.in_view {
                    continue;
                }
                let dilate = (3.0 * rc.mislocation_sigma * scene.camera.fx / p.z).ceil() as i64 + 1;
                let (pu, pv) = (proj.u.floor() as i64, proj.v.floor() as i64);
                let chan = scene.gt.channel(label);
                let mut hit = false;
                'search: for dv in -dilate..=dilate {
                    for du in -dilate..=dilate {
                        let (nu, nv) = (pu + du, pv + dv);
                        if nu < 0 || nv < 0 || nu >= 64 || nv >= 64 {
                            continue;
                        }
                        if chan[(nv * 64 + nu) as usize] == 1.0 {
                            hit = true;
                            break 'search;
                        }
                    }
                }
                assert!(hit, "seed {seed}: point {p:?} outside dilated class-{label} mask");
            }
        }
    }

    #[test]
    fn corruption_leaves_ground_truth_and_radar_untouched() {
        let (sc, rc, _) = desk_cfgs();
        let clean: Scene<f64> = generate_scene(&sc, &rc, &CorruptionConfig::none());
        let foggy: Scene<f64> = generate_scene(
            &sc,
            &rc,
            &CorruptionConfig { mode: CorruptionMode::Fog, severity: 0.8, rng_seed: 3 },
        );
        assert_eq!(clean.gt, foggy.gt);
        assert_eq!(clean.radar, foggy.radar);
        assert_ne!(clean.image, foggy.image);
    }

    #[test]
    fn droplet_pixels_match_disc_rasterization_oracle() {
        let (sc, rc, _) = desk_cfgs();
        let scene: Scene<f64> = generate_scene(&sc, &rc, &CorruptionConfig::none());
        let cfg = CorruptionConfig { mode: CorruptionMode::Droplets, severity: 0.6, rng_seed: 21 };
        let out = corrupt(&scene.image, &cfg);
        let discs = droplet_discs(&cfg, 64, 64);
        assert!(!discs.is_empty());
        for v in 0..64usize {
            for u in 0..64usize {
                let inside = discs.iter().any(|&(cu, cv, r)| {
                    let du = u as f64 + 0.5 - cu;
                    let dv = v as f64 + 0.5 - cv;
                    du * du + dv * dv <= r * r
                });
                if !inside {
                    assert_eq!(out.get(u, v), scene.image.get(u, v), "pixel ({u},{v})");
                }
            }
        }
        // the union itself must have changed somewhere
        assert_ne!(out, scene.image);
    }

    #[test]
    fn corpus_split_fractions_and_round_trip() {
        let cfg = CorpusConfig {
            scene: SceneConfig::desk(32),
            radar: RadarNoiseConfig::default(),
            corruption_modes: vec![CorruptionMode::Fog, CorruptionMode::Blur],
            severity_range: (0.2, 0.6),
            count: 10,
            seed: 77,
        };
        let corpus: Corpus<f64> = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.split_indices(Split::Train).len(), 7);
        assert_eq!(corpus.split_indices(Split::Val).len(), 2);
        assert_eq!(corpus.split_indices(Split::Test).len(), 1);

        let dir = std::env::temp_dir().join("fusionseg-corpus-test");
        let _ = fs::remove_dir_all(&dir);
        write_corpus(&dir, &corpus).unwrap();
        let back: Corpus<f64> = read_corpus(&dir).unwrap();
        assert_eq!(corpus.legend, back.legend);
        assert_eq!(corpus.camera, back.camera);
        assert_eq!(corpus.splits, back.splits);
        assert_eq!(corpus.scenes.len(), back.scenes.len());
        for (a, b) in corpus.scenes.iter().zip(back.scenes.iter()) {
            assert_eq!(a.image, b.image, "scene {}", a.index);
            assert_eq!(a.radar, b.radar);
            // gt survives the f32 plane format exactly (values are 0/1)
            assert_eq!(a.gt, b.gt);
        }
    }
}

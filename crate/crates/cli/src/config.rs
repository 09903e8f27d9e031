//! Plain-text run configuration: `[section]` headers with `key = value`
//! lines. Unknown sections or keys are rejected; every run echoes its fully
//! resolved configuration next to its outputs, so any run can be reproduced
//! from its output directory alone.
//!
//! `--set section.key=value` flags override file values.

use std::collections::BTreeMap;
use std::path::Path;

use fusionseg_core::inpaint::{InpaintConfig, PromptTable};
use fusionseg_core::losses::ClassSubset;
use fusionseg_core::pipeline::{InpaintSettings, ModelConfig, TrainConfig};
use fusionseg_core::prompt_masker::RegionGrowMasker;
use fusionseg_core::synth::{
    class_legend, CorpusConfig, CorruptionMode, RadarNoiseConfig, SceneConfig, Split,
};
use fusionseg_core::{Error, Result};

fn bad(why: impl Into<String>) -> Error {
    Error::InvalidConfig {
        what: "config",
        why: why.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // [scene]
    pub image_size: usize,
    pub object_count: (usize, usize),
    pub waterline_frac: f64,
    pub hue_overlap: f64,
    // [radar]
    pub clutter_rate: f64,
    pub mislocation_sigma: f64,
    pub dropout_prob: f64,
    pub points_per_object: (usize, usize),
    pub rcs_sigma: f64,
    pub doppler_sigma: f64,
    // [corruption]
    pub corruption_modes: Vec<CorruptionMode>,
    pub severity: (f64, f64),
    // [model]
    pub widths: Vec<usize>,
    pub decoder_width: usize,
    pub classifier_hidden: usize,
    pub target_count: usize,
    // [train]
    pub lr_initial: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_seg: f64,
    pub lambda_cls: f64,
    pub lambda_pixel_ce: f64,
    pub weight_decay: f64,
    // [stage2]
    pub mask_threshold: f64,
    pub color_tolerance: f64,
    pub max_region_fraction: f64,
    // [inpaint]
    pub guidance_scale: f64,
    pub inference_steps: u32,
    pub inpaint_seed: u64,
    pub channel_threshold: f64,
    pub noise_amplitude: f64,
    pub prompts: BTreeMap<String, String>,
    // [eval]
    pub workers: usize,
    pub subset: String,
    pub split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 64,
            object_count: (2, 4),
            waterline_frac: 0.45,
            hue_overlap: 1.0,
            clutter_rate: 6.0,
            mislocation_sigma: 0.25,
            dropout_prob: 0.1,
            points_per_object: (15, 30),
            rcs_sigma: 2.5,
            doppler_sigma: 0.6,
            corruption_modes: CorruptionMode::all_adverse(),
            severity: (0.35, 0.75),
            widths: vec![4, 8, 16, 32],
            decoder_width: 16,
            classifier_hidden: 32,
            target_count: 1000,
            lr_initial: 5e-4,
            lr_min: 1e-6,
            epochs: 12,
            batch_size: 8,
            lambda_seg: 1.0,
            lambda_cls: 1.0,
            lambda_pixel_ce: 1.0,
            weight_decay: 0.0,
            mask_threshold: 0.5,
            color_tolerance: 0.08,
            max_region_fraction: 0.5,
            guidance_scale: 7.0,
            inference_steps: 50,
            inpaint_seed: 0,
            channel_threshold: 0.5,
            noise_amplitude: 0.25,
            prompts: BTreeMap::new(),
            workers: 1,
            subset: "all".into(),
            split: "test".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                self.check_section(&section)
                    .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected `key = value`", lineno + 1)))?;
            if section.is_empty() {
                return Err(bad(format!("line {}: key before any [section]", lineno + 1)));
            }
            self.set(&section, key.trim(), value.trim())
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    fn check_section(&self, section: &str) -> Result<()> {
        match section {
            "scene" | "radar" | "corruption" | "model" | "train" | "stage2" | "inpaint"
            | "eval" => Ok(()),
            other => Err(bad(format!("unknown section `[{other}]`"))),
        }
    }

    /// Apply one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| bad(format!("override `{spec}`: expected section.key=value")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| bad(format!("override `{spec}`: expected section.key=value")))?;
        self.check_section(section)?;
        self.set(section, key, value)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| bad(format!("`{v}` is not an integer")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| bad(format!("`{v}` is not a number")))
        };
        let parse_u64 = |v: &str| -> Result<u64> {
            v.parse().map_err(|_| bad(format!("`{v}` is not an integer")))
        };
        let parse_usize_range = |v: &str| -> Result<(usize, usize)> {
            let (a, b) = v
                .split_once("..")
                .ok_or_else(|| bad(format!("`{v}` is not a `lo..hi` range")))?;
            Ok((parse_usize(a.trim())?, parse_usize(b.trim())?))
        };
        let parse_f64_range = |v: &str| -> Result<(f64, f64)> {
            let (a, b) = v
                .split_once("..")
                .ok_or_else(|| bad(format!("`{v}` is not a `lo..hi` range")))?;
            Ok((parse_f64(a.trim())?, parse_f64(b.trim())?))
        };
        match (section, key) {
            ("scene", "image_size") => self.image_size = parse_usize(value)?,
            ("scene", "object_count") => self.object_count = parse_usize_range(value)?,
            ("scene", "waterline_frac") => self.waterline_frac = parse_f64(value)?,
            ("scene", "hue_overlap") => self.hue_overlap = parse_f64(value)?,

            ("radar", "clutter_rate") => self.clutter_rate = parse_f64(value)?,
            ("radar", "mislocation_sigma") => self.mislocation_sigma = parse_f64(value)?,
            ("radar", "dropout_prob") => self.dropout_prob = parse_f64(value)?,
            ("radar", "points_per_object") => self.points_per_object = parse_usize_range(value)?,
            ("radar", "rcs_sigma") => self.rcs_sigma = parse_f64(value)?,
            ("radar", "doppler_sigma") => self.doppler_sigma = parse_f64(value)?,

            ("corruption", "modes") => {
                let mut modes = Vec::new();
                for m in value.split(',') {
                    modes.push(CorruptionMode::parse(m.trim())?);
                }
                if modes.is_empty() {
                    return Err(bad("corruption.modes must not be empty"));
                }
                self.corruption_modes = modes;
            }
            ("corruption", "severity") => self.severity = parse_f64_range(value)?,

            ("model", "widths") => {
                let mut widths = Vec::new();
                for w in value.split(',') {
                    widths.push(parse_usize(w.trim())?);
                }
                self.widths = widths;
            }
            ("model", "decoder_width") => self.decoder_width = parse_usize(value)?,
            ("model", "classifier_hidden") => self.classifier_hidden = parse_usize(value)?,
            ("model", "target_count") => self.target_count = parse_usize(value)?,

            ("train", "lr_initial") => self.lr_initial = parse_f64(value)?,
            ("train", "lr_min") => self.lr_min = parse_f64(value)?,
            ("train", "epochs") => self.epochs = parse_usize(value)?,
            ("train", "batch_size") => self.batch_size = parse_usize(value)?,
            ("train", "lambda_seg") => self.lambda_seg = parse_f64(value)?,
            ("train", "lambda_cls") => self.lambda_cls = parse_f64(value)?,
            ("train", "lambda_pixel_ce") => self.lambda_pixel_ce = parse_f64(value)?,
            ("train", "weight_decay") => self.weight_decay = parse_f64(value)?,

            ("stage2", "mask_threshold") => self.mask_threshold = parse_f64(value)?,
            ("stage2", "color_tolerance") => self.color_tolerance = parse_f64(value)?,
            ("stage2", "max_region_fraction") => self.max_region_fraction = parse_f64(value)?,

            ("inpaint", "guidance_scale") => self.guidance_scale = parse_f64(value)?,
            ("inpaint", "inference_steps") => {
                self.inference_steps = parse_u64(value)? as u32
            }
            ("inpaint", "seed") => self.inpaint_seed = parse_u64(value)?,
            ("inpaint", "channel_threshold") => self.channel_threshold = parse_f64(value)?,
            ("inpaint", "noise_amplitude") => self.noise_amplitude = parse_f64(value)?,
            ("inpaint", k) if k.starts_with("prompt.") => {
                let class = k.trim_start_matches("prompt.");
                if class.is_empty() {
                    return Err(bad("empty class name in prompt override"));
                }
                self.prompts.insert(class.to_string(), value.to_string());
            }

            ("eval", "workers") => self.workers = parse_usize(value)?,
            ("eval", "subset") => {
                ClassSubset::parse(value)?;
                self.subset = value.to_string();
            }
            ("eval", "split") => {
                Split::parse(value)?;
                self.split = value.to_string();
            }

            (s, k) => return Err(bad(format!("unknown key `{k}` in section `[{s}]`"))),
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# fusionseg resolved configuration\n");
        out.push_str("[scene]\n");
        out.push_str(&format!("image_size = {}\n", self.image_size));
        out.push_str(&format!(
            "object_count = {}..{}\n",
            self.object_count.0, self.object_count.1
        ));
        out.push_str(&format!("waterline_frac = {}\n", self.waterline_frac));
        out.push_str(&format!("hue_overlap = {}\n", self.hue_overlap));
        out.push_str("\n[radar]\n");
        out.push_str(&format!("clutter_rate = {}\n", self.clutter_rate));
        out.push_str(&format!("mislocation_sigma = {}\n", self.mislocation_sigma));
        out.push_str(&format!("dropout_prob = {}\n", self.dropout_prob));
        out.push_str(&format!(
            "points_per_object = {}..{}\n",
            self.points_per_object.0, self.points_per_object.1
        ));
        out.push_str(&format!("rcs_sigma = {}\n", self.rcs_sigma));
        out.push_str(&format!("doppler_sigma = {}\n", self.doppler_sigma));
        out.push_str("\n[corruption]\n");
        let modes: Vec<&str> = self.corruption_modes.iter().map(|m| m.name()).collect();
        out.push_str(&format!("modes = {}\n", modes.join(",")));
        out.push_str(&format!("severity = {}..{}\n", self.severity.0, self.severity.1));
        out.push_str("\n[model]\n");
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        out.push_str(&format!("widths = {}\n", widths.join(",")));
        out.push_str(&format!("decoder_width = {}\n", self.decoder_width));
        out.push_str(&format!("classifier_hidden = {}\n", self.classifier_hidden));
        out.push_str(&format!("target_count = {}\n", self.target_count));
        out.push_str("\n[train]\n");
        out.push_str(&format!("lr_initial = {}\n", self.lr_initial));
        out.push_str(&format!("lr_min = {}\n", self.lr_min));
        out.push_str(&format!("epochs = {}\n", self.epochs));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("lambda_seg = {}\n", self.lambda_seg));
        out.push_str(&format!("lambda_cls = {}\n", self.lambda_cls));
        out.push_str(&format!("lambda_pixel_ce = {}\n", self.lambda_pixel_ce));
        out.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        out.push_str("\n[stage2]\n");
        out.push_str(&format!("mask_threshold = {}\n", self.mask_threshold));
        out.push_str(&format!("color_tolerance = {}\n", self.color_tolerance));
        out.push_str(&format!(
            "max_region_fraction = {}\n",
            self.max_region_fraction
        ));
        out.push_str("\n[inpaint]\n");
        out.push_str(&format!("guidance_scale = {}\n", self.guidance_scale));
        out.push_str(&format!("inference_steps = {}\n", self.inference_steps));
        out.push_str(&format!("seed = {}\n", self.inpaint_seed));
        out.push_str(&format!("channel_threshold = {}\n", self.channel_threshold));
        out.push_str(&format!("noise_amplitude = {}\n", self.noise_amplitude));
        for (class, prompt) in &self.prompts {
            out.push_str(&format!("prompt.{class} = {prompt}\n"));
        }
        out.push_str("\n[eval]\n");
        out.push_str(&format!("workers = {}\n", self.workers));
        out.push_str(&format!("subset = {}\n", self.subset));
        out.push_str(&format!("split = {}\n", self.split));
        out
    }

    // ── Views into core config types ────────────────────────────────

    pub fn corpus_config(&self, count: usize, seed: u64, adverse_only: bool) -> Result<CorpusConfig> {
        let mut modes = self.corruption_modes.clone();
        if adverse_only {
            modes.retain(|m| !matches!(m, CorruptionMode::None));
            if modes.is_empty() {
                return Err(bad("--adverse-only removed every corruption mode"));
            }
        }
        Ok(CorpusConfig {
            scene: SceneConfig {
                width: self.image_size,
                height: self.image_size,
                object_count: self.object_count,
                waterline_frac: self.waterline_frac,
                hue_overlap: self.hue_overlap,
                rng_seed: 0,
            },
            radar: RadarNoiseConfig {
                clutter_rate: self.clutter_rate,
                mislocation_sigma: self.mislocation_sigma,
                dropout_prob: self.dropout_prob,
                points_per_object: self.points_per_object,
                rcs_sigma: self.rcs_sigma,
                doppler_sigma: self.doppler_sigma,
            },
            corruption_modes: modes,
            severity_range: self.severity,
            count,
            seed,
        })
    }

    pub fn model_config(&self, radar_enabled: bool) -> ModelConfig {
        ModelConfig {
            n_classes: class_legend().len(),
            widths: self.widths.clone(),
            decoder_width: self.decoder_width,
            classifier_hidden: self.classifier_hidden,
            target_count: self.target_count,
            radar_enabled,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_initial: self.lr_initial,
            lr_min: self.lr_min,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda_seg: self.lambda_seg,
            lambda_cls: self.lambda_cls,
            lambda_pixel_ce: self.lambda_pixel_ce,
            weight_decay: self.weight_decay,
            seed,
        }
    }

    pub fn masker(&self) -> RegionGrowMasker {
        RegionGrowMasker {
            color_tolerance: self.color_tolerance,
            max_region_fraction: self.max_region_fraction,
        }
    }

    pub fn inpaint_settings(&self, legend: &[String]) -> InpaintSettings {
        let mut prompts = PromptTable::default_for_legend(legend);
        for (class, text) in &self.prompts {
            prompts.set(class.clone(), text.clone());
        }
        InpaintSettings {
            config: InpaintConfig {
                guidance_scale: self.guidance_scale,
                inference_steps: self.inference_steps,
                rng_seed: self.inpaint_seed,
            },
            prompts,
            channel_threshold: self.channel_threshold,
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_text_form() {
        let cfg = RunConfig::default();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("[scene]\nimage_sizes = 64\n").is_err());
        assert!(cfg.apply_text("[paint]\nx = 1\n").is_err());
        assert!(cfg.apply_override("scene.unknown=3").is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        cfg.apply_override("train.epochs=9").unwrap();
        assert_eq!(cfg.epochs, 9);
        cfg.apply_override("scene.object_count=1..2").unwrap();
        assert_eq!(cfg.object_count, (1, 2));
    }

    #[test]
    fn prompt_overrides_land_in_the_table() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("[inpaint]\nprompt.boat = a freshly painted boat\n")
            .unwrap();
        let settings = cfg.inpaint_settings(&class_legend());
        assert_eq!(settings.prompts.get("boat").unwrap(), "a freshly painted boat");
        // untouched classes keep the default
        assert!(settings.prompts.get("buoy").unwrap().contains("buoy"));
    }
}

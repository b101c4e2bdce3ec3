//! Synthetic stand-in for the dual-camera capture rig: stick-figure scenes
//! rendered well-lit, degraded through an ND filter and shortened exposures,
//! and stored as paired PNGs with CrowdPose-style annotations.

mod dataset;
mod render;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::netcore::NUM_JOINTS;

pub use dataset::{
    generate_dataset, load_annotations, load_dataset, save_annotations, Dataset, ImageEntry, Manifest,
    PairRecord, ANNOTATION_FILE, MANIFEST_FILE,
};
pub use render::{render_well_lit, SceneConfig, SceneSpec, LIMBS};

/// CrowdPose joint order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "head",
    "neck",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Indoor,
    Outdoor,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(Profile::Indoor),
            "outdoor" => Ok(Profile::Outdoor),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected indoor or outdoor)"
            ))),
        }
    }
}

impl Profile {
    pub fn default_ladder(self) -> Vec<f64> {
        match self {
            Profile::Outdoor => vec![1.0, 2.0, 4.0, 8.0, 12.0],
            Profile::Indoor => vec![1.0, 2.0, 3.0, 4.0, 6.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureConfig {
    pub nd_attenuation: f64,
    pub exposure_ladder: Vec<f64>,
    /// Per-scene base gain range; a pair's recorded gain is the scene's base
    /// gain times the pair's exposure factor.
    pub gain_range: (f64, f64),
    pub read_noise_sigma: f64,
    pub shot_noise_scale: f64,
    pub bit_depth: u8,
}

impl CaptureConfig {
    pub fn new(profile: Profile) -> Self {
        CaptureConfig {
            nd_attenuation: 100.0,
            exposure_ladder: profile.default_ladder(),
            gain_range: (2.0, 5.0),
            read_noise_sigma: 3e-4,
            shot_noise_scale: 3e-4,
            bit_depth: 8,
        }
    }

    /// 16-bit capture so the darkest exposures keep more than a handful of
    /// quantization levels.
    pub fn benchmark(profile: Profile) -> Self {
        CaptureConfig {
            bit_depth: 16,
            ..CaptureConfig::new(profile)
        }
    }

    /// No shot or read noise.
    pub fn noiseless(mut self) -> Self {
        self.read_noise_sigma = 0.0;
        self.shot_noise_scale = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nd_attenuation > 0.0 && self.nd_attenuation.is_finite()) {
            return Err(Error::Config(format!(
                "nd_attenuation must be positive, got {}",
                self.nd_attenuation
            )));
        }
        if let Some(f) = self.exposure_ladder.iter().find(|f| !(**f >= 1.0 && f.is_finite())) {
            return Err(Error::Config(format!("exposure factors must be >= 1, got {f}")));
        }
        let (lo, hi) = self.gain_range;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "gain range must satisfy 1 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !(self.read_noise_sigma >= 0.0 && self.shot_noise_scale >= 0.0) {
            return Err(Error::Config("noise parameters must be non-negative".into()));
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(Error::Config(format!(
                "bit_depth must be 8 or 16, got {}",
                self.bit_depth
            )));
        }
        Ok(())
    }

    /// Rounds to the nearest representable level of the configured bit depth.
    pub fn quantize(&self, v: f64) -> f64 {
        let levels = ((1u32 << self.bit_depth) - 1) as f64;
        (v.clamp(0.0, 1.0) * levels).round() / levels
    }
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig::new(Profile::Outdoor)
    }
}

/// A pixel-aligned capture of one scene under both conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub well_lit: Image,
    pub low_light: Image,
    pub gain: f64,
    pub exposure_factor: f64,
    pub scene_id: String,
    pub pair_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    /// 0 unlabelled, 1 labelled but occluded, 2 visible.
    pub v: u8,
}

/// One person: 14 joints in pixel coordinates and a bounding box `(x, y, w, h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseAnnotation {
    pub joints: [Joint; NUM_JOINTS],
    pub bbox: [f64; 4],
    pub instance_id: u64,
    /// Annotations are shared by every pair of a scene.
    pub scene_id: String,
}

impl PoseAnnotation {
    pub fn num_labelled(&self) -> usize {
        self.joints.iter().filter(|j| j.v > 0).count()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let ctx = format!("annotation {}", self.instance_id);
        if !(self.bbox[2] > 0.0 && self.bbox[3] > 0.0) {
            return Err(Error::schema(ctx, "bbox", "width and height must be positive"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if j.v > 2 {
                return Err(Error::schema(ctx, "keypoints", format!("joint {i} has flag {}", j.v)));
            }
            let inside = j.x >= 0.0 && j.y >= 0.0 && j.x <= (width - 1) as f64 && j.y <= (height - 1) as f64;
            if j.v > 0 && !inside {
                return Err(Error::schema(
                    ctx,
                    "keypoints",
                    format!("labelled joint {i} at ({}, {}) lies outside the image", j.x, j.y),
                ));
            }
        }
        Ok(())
    }
}

/// ND filter, shortened exposure, sensor noise, clipping and quantization.
pub fn degrade_to_low_light(
    well_lit: &Image,
    cfg: &CaptureConfig,
    exposure_factor: f64,
    rng_seed: u64,
) -> Result<Image> {
    cfg.validate()?;
    if !cfg.exposure_ladder.contains(&exposure_factor) {
        return Err(Error::Config(format!(
            "exposure factor {exposure_factor} is not on the ladder {:?}",
            cfg.exposure_ladder
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let divisor = cfg.nd_attenuation * exposure_factor;
    let mut out = well_lit.clone();
    for v in out.data_mut() {
        let signal = *v / divisor;
        let mut noisy = signal;
        if cfg.shot_noise_scale > 0.0 {
            noisy += (signal * cfg.shot_noise_scale).sqrt() * std.sample(&mut rng);
        }
        if cfg.read_noise_sigma > 0.0 {
            noisy += cfg.read_noise_sigma * std.sample(&mut rng);
        }
        *v = cfg.quantize(noisy);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(v: f64) -> Image {
        Image::from_vec(4, 5, vec![v; 60]).unwrap()
    }

    #[test]
    fn ladders() {
        assert_eq!(CaptureConfig::new(Profile::Outdoor).exposure_ladder, vec![1.0, 2.0, 4.0, 8.0, 12.0]);
        assert_eq!(CaptureConfig::new(Profile::Indoor).exposure_ladder, vec![1.0, 2.0, 3.0, 4.0, 6.0]);
        assert_eq!(CaptureConfig::default().nd_attenuation, 100.0);
        assert_eq!(CaptureConfig::default().bit_depth, 8);
    }

    #[test]
    fn quantized_attenuation_examples() {
        let cfg = CaptureConfig::default().noiseless();
        let out = degrade_to_low_light(&constant(1.0), &cfg, 4.0, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0 / 255.0));
        let img = Image::from_vec(1, 2, vec![0.3, 0.9, 1.0, 0.05, 0.5, 0.77]).unwrap();
        let out = degrade_to_low_light(&img, &cfg, 1.0, 0).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            assert_eq!(*o, cfg.quantize(i / 100.0));
        }
    }

    #[test]
    fn zero_image_is_noise_only() {
        let cfg = CaptureConfig::default();
        let out = degrade_to_low_light(&Image::zeros(32, 32), &cfg, 1.0, 9).unwrap();
        assert!(out.mean() <= 2.0 / 255.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = CaptureConfig {
            nd_attenuation: 0.0,
            ..CaptureConfig::default()
        };
        assert!(matches!(degrade_to_low_light(&constant(0.5), &cfg, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(
            degrade_to_low_light(&constant(0.5), &CaptureConfig::default(), 3.0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degradation_is_deterministic() {
        let cfg = CaptureConfig {
            bit_depth: 16,
            ..CaptureConfig::default()
        };
        let img = constant(0.6);
        assert_eq!(
            degrade_to_low_light(&img, &cfg, 8.0, 5).unwrap(),
            degrade_to_low_light(&img, &cfg, 8.0, 5).unwrap()
        );
    }

    proptest! {
        #[test]
        fn longer_reduction_never_brightens(values in proptest::collection::vec(0.0f64..=1.0, 12), depth in prop_oneof![Just(8u8), Just(16u8)]) {
            let img = Image::from_vec(2, 2, values).unwrap();
            let cfg = CaptureConfig { bit_depth: depth, ..CaptureConfig::default().noiseless() };
            let mut prev: Option<Image> = None;
            for &f in &cfg.exposure_ladder {
                let out = degrade_to_low_light(&img, &cfg, f, 0).unwrap();
                if let Some(p) = &prev {
                    for (a, b) in out.data().iter().zip(p.data()) {
                        prop_assert!(a <= b);
                    }
                }
                prev = Some(out);
            }
        }
    }
}

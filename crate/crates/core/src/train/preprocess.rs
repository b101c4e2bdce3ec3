use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::netcore::NUM_JOINTS;
use crate::synthgen::{Joint, PoseAnnotation};
use crate::tensor::Tensor;

/// Ratio between network input and heatmap resolution.
pub const HEATMAP_STRIDE: f64 = 4.0;

/// Rescales so the mean intensity becomes `target`, then clips to `[0, 1]`.
/// The post-clip mean is not corrected.
pub fn intensity_scale(img: &Image, target: f64) -> Result<Image> {
    let mean = img.mean();
    if !(mean > 0.0) {
        return Err(Error::Degenerate(format!(
            "cannot rescale an image with mean intensity {mean}"
        )));
    }
    let k = target / mean;
    let data = img.data().iter().map(|v| (v * k).clamp(0.0, 1.0)).collect();
    Image::from_vec(img.height(), img.width(), data)
}

/// Maps network-input pixel coordinates to image coordinates:
/// `image = centre + scale * (input - input_centre)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub centre: [f64; 2],
    /// Image pixels per input pixel.
    pub scale: f64,
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
}

impl CropTransform {
    /// Box around `bbox` with the input's aspect ratio, enlarged by `margin`
    /// and by the augmentation factor `aug`.
    pub fn from_bbox(bbox: [f64; 4], input_size: (usize, usize), margin: f64, aug: f64) -> Result<Self> {
        let [x, y, w, h] = bbox;
        if !(w > 0.0 && h > 0.0) || !bbox.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("invalid bounding box {bbox:?}")));
        }
        let aspect = input_size.1 as f64 / input_size.0 as f64;
        let (bw, _bh) = if w > aspect * h { (w, w / aspect) } else { (h * aspect, h) };
        Ok(CropTransform {
            centre: [x + w / 2.0, y + h / 2.0],
            scale: bw * margin * aug / input_size.1 as f64,
            input_size,
        })
    }

    fn input_centre(&self) -> [f64; 2] {
        [
            (self.input_size.1 as f64 - 1.0) / 2.0,
            (self.input_size.0 as f64 - 1.0) / 2.0,
        ]
    }

    pub fn to_image(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.input_centre();
        [
            self.centre[0] + self.scale * (p[0] - c[0]),
            self.centre[1] + self.scale * (p[1] - c[1]),
        ]
    }

    pub fn to_input(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.input_centre();
        [
            c[0] + (p[0] - self.centre[0]) / self.scale,
            c[1] + (p[1] - self.centre[1]) / self.scale,
        ]
    }

    /// Bilinear resampling of `img` into the input frame; zero outside.
    pub fn apply(&self, img: &Image) -> Image {
        let (h, w) = self.input_size;
        let mut out = Image::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let p = self.to_image([x as f64, y as f64]);
                if let Some(px) = img.sample(p[1], p[0]) {
                    for (c, v) in px.iter().enumerate() {
                        out.set(y, x, c, *v);
                    }
                }
            }
        }
        out
    }

    /// Annotation in input coordinates. Joints that leave the crop lose their
    /// label.
    pub fn transform_annotation(&self, ann: &PoseAnnotation) -> PoseAnnotation {
        let (h, w) = self.input_size;
        let joints = ann.joints.map(|j| {
            let p = self.to_input([j.x, j.y]);
            let inside = p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64;
            Joint {
                x: p[0],
                y: p[1],
                v: if inside { j.v } else { 0 },
            }
        });
        let tl = self.to_input([ann.bbox[0], ann.bbox[1]]);
        PoseAnnotation {
            joints,
            bbox: [tl[0], tl[1], ann.bbox[2] / self.scale, ann.bbox[3] / self.scale],
            instance_id: ann.instance_id,
            scene_id: ann.scene_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub margin: f64,
    pub scale_range: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            margin: 1.25,
            scale_range: (0.7, 1.35),
        }
    }
}

/// One training sample: paired crops sharing a single geometric transform.
#[derive(Clone, Debug)]
pub struct CropSample {
    pub student: Image,
    pub teacher: Image,
    pub annotation: PoseAnnotation,
    pub transform: CropTransform,
}

/// Draws a random scale, crops both images of the pair with the same
/// transform and maps the annotation into input coordinates.
pub fn crop_and_augment(
    well_lit: &Image,
    low_light: &Image,
    ann: &PoseAnnotation,
    input_size: (usize, usize),
    cfg: &CropConfig,
    rng: &mut impl Rng,
) -> Result<CropSample> {
    let [x, y, w, h] = ann.bbox;
    let (iw, ih) = (well_lit.width() as f64, well_lit.height() as f64);
    if x + w <= 0.0 || y + h <= 0.0 || x >= iw || y >= ih {
        return Err(Error::Contract(format!(
            "bounding box {:?} lies outside the {}x{} image",
            ann.bbox,
            well_lit.height(),
            well_lit.width()
        )));
    }
    let (lo, hi) = cfg.scale_range;
    let aug = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let t = CropTransform::from_bbox(ann.bbox, input_size, cfg.margin, aug)?;
    Ok(CropSample {
        student: t.apply(low_light),
        teacher: t.apply(well_lit),
        annotation: t.transform_annotation(ann),
        transform: t,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetHeatmapSpec {
    /// Gaussian width in heatmap pixels.
    pub sigma: f64,
    /// `(h, w)`, a quarter of the input size.
    pub size: (usize, usize),
}

impl Default for TargetHeatmapSpec {
    fn default() -> Self {
        TargetHeatmapSpec {
            sigma: 2.0,
            size: (64, 48),
        }
    }
}

/// Input pixel coordinate to heatmap coordinate (pixel centres at integers).
pub fn input_to_heatmap(p: f64) -> f64 {
    (p - (HEATMAP_STRIDE - 1.0) / 2.0) / HEATMAP_STRIDE
}

pub fn heatmap_to_input(u: f64) -> f64 {
    u * HEATMAP_STRIDE + (HEATMAP_STRIDE - 1.0) / 2.0
}

/// Peak-1 Gaussians per labelled joint (`14 x h x w`) and the per-joint mask.
/// `ann` must be in input coordinates.
pub fn make_target_heatmaps(ann: &PoseAnnotation, spec: &TargetHeatmapSpec) -> Result<(Tensor, [bool; NUM_JOINTS])> {
    if !(spec.sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {}", spec.sigma)));
    }
    let (h, w) = spec.size;
    let mut data = vec![0.0; NUM_JOINTS * h * w];
    let mut mask = [false; NUM_JOINTS];
    let denom = 2.0 * spec.sigma * spec.sigma;
    for (k, j) in ann.joints.iter().enumerate() {
        if j.v == 0 {
            continue;
        }
        mask[k] = true;
        let (u, v) = (input_to_heatmap(j.x), input_to_heatmap(j.y));
        let ch = &mut data[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            let dy = y as f64 - v;
            for x in 0..w {
                let dx = x as f64 - u;
                ch[y * w + x] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    Ok((Tensor::from_vec(&[NUM_JOINTS, h, w], data)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ann_at(points: &[(f64, f64)]) -> PoseAnnotation {
        PoseAnnotation {
            joints: std::array::from_fn(|i| {
                let (x, y) = points.get(i).copied().unwrap_or((0.0, 0.0));
                Joint {
                    x,
                    y,
                    v: if i < points.len() { 2 } else { 0 },
                }
            }),
            bbox: [10.0, 20.0, 30.0, 40.0],
            instance_id: 0,
            scene_id: "s".into(),
        }
    }

    #[test]
    fn intensity_scaling_examples() {
        let img = Image::from_vec(1, 2, vec![0.05, 0.1, 0.15, 0.05, 0.1, 0.15]).unwrap();
        let out = intensity_scale(&img, 0.4).unwrap();
        assert!((out.mean() - 0.4).abs() < 1e-12);
        let fixed = Image::from_vec(1, 1, vec![0.3, 0.4, 0.5]).unwrap();
        let same = intensity_scale(&fixed, 0.4).unwrap();
        for (a, b) in same.data().iter().zip(fixed.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // mostly dark with a few saturated pixels: clipping pulls the mean below target
        let mut v = vec![0.9; 6];
        v.extend(vec![0.0; 12]);
        let bimodal = Image::from_vec(2, 3, v).unwrap();
        assert!((bimodal.mean() - 0.3).abs() < 1e-12);
        assert!(intensity_scale(&bimodal, 0.4).unwrap().mean() < 0.4);
        assert!(matches!(intensity_scale(&Image::zeros(2, 2), 0.4), Err(Error::Degenerate(_))));
    }

    #[test]
    fn crop_without_augmentation_is_pure_affine() {
        let ann = ann_at(&[(25.0, 40.0), (10.0, 20.0)]);
        let t = CropTransform::from_bbox(ann.bbox, (64, 48), 1.25, 1.0).unwrap();
        // 30x40 box is already 3:4, so the crop spans 40 * 1.25 = 50 px tall
        assert!((t.scale - 50.0 / 64.0).abs() < 1e-12);
        let out = t.transform_annotation(&ann);
        assert!((out.joints[0].x - 23.5).abs() < 1e-12 && (out.joints[0].y - 31.5).abs() < 1e-12);
        let back = t.to_image([out.joints[1].x, out.joints[1].y]);
        assert!((back[0] - 10.0).abs() < 1e-12 && (back[1] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn centre_joint_lands_on_heatmap_centre() {
        let ann = ann_at(&[(25.0, 40.0)]);
        let t = CropTransform::from_bbox(ann.bbox, (64, 48), 1.25, 1.0).unwrap();
        let spec = TargetHeatmapSpec::default();
        let spec = TargetHeatmapSpec { size: (16, 12), ..spec };
        let (hm, mask) = make_target_heatmaps(&t.transform_annotation(&ann), &spec).unwrap();
        assert!(mask[0] && !mask[1]);
        // the peak sits between the four central heatmap pixels
        let at = |y: usize, x: usize| hm.data()[y * 12 + x];
        let c = at(7, 5);
        assert!(c > 0.8);
        assert!((at(7, 6) - c).abs() < 1e-12 && (at(8, 5) - c).abs() < 1e-12 && (at(8, 6) - c).abs() < 1e-12);
        assert!(hm.data()[16 * 12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_peak_and_channels() {
        let ann = ann_at(&[(heatmap_to_input(10.0), heatmap_to_input(20.0)), (heatmap_to_input(11.0), heatmap_to_input(20.0))]);
        let spec = TargetHeatmapSpec::default();
        let (hm, _) = make_target_heatmaps(&ann, &spec).unwrap();
        let ch0 = &hm.data()[..64 * 48];
        let (idx, &max) = ch0.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!((idx / 48, idx % 48), (20, 10));
        assert_eq!(max, 1.0);
        let ch1 = &hm.data()[64 * 48..2 * 64 * 48];
        let idx1 = ch1.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!((idx1 / 48, idx1 % 48), (20, 11));
        assert!(hm.data()[2 * 64 * 48..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_members_share_the_transform() {
        let mut wl = Image::zeros(60, 50);
        let mut ll = Image::zeros(60, 50);
        for (i, v) in wl.data_mut().iter_mut().enumerate() {
            *v = (i % 17) as f64 / 16.0;
        }
        for (i, v) in ll.data_mut().iter_mut().enumerate() {
            *v = (i % 17) as f64 / 1600.0;
        }
        let ann = ann_at(&[(25.0, 40.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = crop_and_augment(&wl, &ll, &ann, (32, 24), &CropConfig::default(), &mut rng).unwrap();
        for (a, b) in s.teacher.data().iter().zip(s.student.data()) {
            assert!((a / 100.0 - b).abs() < 1e-12);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = crop_and_augment(&wl, &ll, &ann, (32, 24), &CropConfig::default(), &mut r1).unwrap();
        let b = crop_and_augment(&wl, &ll, &ann, (32, 24), &CropConfig::default(), &mut r2).unwrap();
        assert_eq!(a.transform, b.transform);
        let mut far = ann.clone();
        far.bbox = [500.0, 500.0, 10.0, 10.0];
        assert!(crop_and_augment(&wl, &ll, &far, (32, 24), &CropConfig::default(), &mut r1).is_err());
    }
}

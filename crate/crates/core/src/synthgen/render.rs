use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Joint, PoseAnnotation, Profile};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::netcore::NUM_JOINTS;

/// Skeleton connectivity as joint index pairs, drawing order back to front.
pub const LIMBS: [(usize, usize); 15] = [
    (6, 8),
    (8, 10),
    (7, 9),
    (9, 11),
    (0, 6),
    (1, 7),
    (6, 7),
    (0, 1),
    (13, 0),
    (13, 1),
    (0, 2),
    (2, 4),
    (1, 3),
    (3, 5),
    (12, 13),
];

/// Narrowest horizontal slot a figure may occupy.
const MIN_SLOT_WIDTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Range of figure heights in pixels.
    pub figure_height: (f64, f64),
    pub instances: usize,
    /// Allowed limb lengths in pixels.
    pub limb_bounds: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 96,
            width: 72,
            figure_height: (56.0, 84.0),
            instances: 1,
            limb_bounds: (2.0, 60.0),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < MIN_SLOT_WIDTH {
            return Err(Error::Config(format!(
                "scene {}x{} is too small",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.figure_height;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("bad figure height range ({lo}, {hi})")));
        }
        if self.instances == 0 {
            return Err(Error::Config("scenes need at least one instance".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    /// One 14-joint skeleton per instance, `[x, y]` in pixels.
    pub skeletons: Vec<[[f64; 2]; NUM_JOINTS]>,
    pub background_seed: u64,
    pub profile: Profile,
    pub limb_bounds: (f64, f64),
}

fn rotate(p: [f64; 2], c: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, co) = angle.sin_cos();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    [c[0] + co * dx - s * dy, c[1] + s * dx + co * dy]
}

/// A front-facing figure of height `h` with its head top at the origin.
fn random_skeleton(rng: &mut ChaCha8Rng, h: f64) -> [[f64; 2]; NUM_JOINTS] {
    let mut j = [[0.0; 2]; NUM_JOINTS];
    let lean = rng.random_range(-0.06..0.06) * h;
    j[12] = [0.0, 0.0];
    j[13] = [lean, 0.16 * h];
    let sy = 0.19 * h;
    let sw = rng.random_range(0.10..0.13) * h;
    let hy = rng.random_range(0.50..0.55) * h;
    let hw = rng.random_range(0.06..0.08) * h;
    // the person's left is on the image's right
    for (side, sign) in [(0usize, 1.0), (1usize, -1.0)] {
        j[side] = [lean + sign * sw, sy];
        j[6 + side] = [sign * hw, hy];
        let up = rng.random_range(-0.35f64..2.6);
        let bend = up + rng.random_range(-0.5f64..2.0);
        let (ua, fa) = (0.17 * h, 0.15 * h);
        j[2 + side] = [j[side][0] + sign * ua * up.sin(), j[side][1] + ua * up.cos()];
        j[4 + side] = [j[2 + side][0] + sign * fa * bend.sin(), j[2 + side][1] + fa * bend.cos()];
        let thigh = rng.random_range(-0.15f64..0.6);
        let shin = thigh + rng.random_range(-0.5f64..0.5);
        let (tl, sl) = (0.24 * h, 0.23 * h);
        j[8 + side] = [j[6 + side][0] + sign * tl * thigh.sin(), j[6 + side][1] + tl * thigh.cos()];
        j[10 + side] = [j[8 + side][0] + sign * sl * shin.sin(), j[8 + side][1] + sl * shin.cos()];
    }
    let tilt = rng.random_range(-0.2..0.2);
    let centre = [0.0, hy];
    for p in j.iter_mut() {
        *p = rotate(*p, centre, tilt);
    }
    j
}

impl SceneSpec {
    pub fn n_instances(&self) -> usize {
        self.skeletons.len()
    }

    /// How many figures fit side by side.
    pub fn capacity(&self) -> usize {
        (self.width / MIN_SLOT_WIDTH).max(1)
    }

    /// Samples figures into equal horizontal slots.
    pub fn random(scene_id: &str, cfg: &SceneConfig, profile: Profile, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut spec = SceneSpec {
            scene_id: scene_id.to_string(),
            height: cfg.height,
            width: cfg.width,
            skeletons: Vec::new(),
            background_seed: rng.random(),
            profile,
            limb_bounds: cfg.limb_bounds,
        };
        if cfg.instances > spec.capacity() {
            return Err(Error::Rejected(format!(
                "{} instances do not fit a {}-pixel-wide frame (capacity {})",
                cfg.instances,
                cfg.width,
                spec.capacity()
            )));
        }
        let slot = cfg.width as f64 / cfg.instances as f64;
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        for i in 0..cfg.instances {
            let fh = rng.random_range(cfg.figure_height.0..=cfg.figure_height.1);
            let mut sk = random_skeleton(rng, fh);
            let (mut x0, mut x1, mut y0, mut y1) = bounds(&sk);
            let margin = 0.06 * fh + 2.0;
            let fit = ((w - 1.0 - 2.0 * margin) / (x1 - x0))
                .min((h - 1.0 - 2.0 * margin) / (y1 - y0))
                .min(1.0);
            for p in sk.iter_mut() {
                p[0] *= fit;
                p[1] *= fit;
            }
            (x0, x1, y0, y1) = (x0 * fit, x1 * fit, y0 * fit, y1 * fit);
            let want_x = slot * (i as f64 + 0.5) + rng.random_range(-0.15..0.15) * slot;
            let (lo, hi) = (margin - x0, w - 1.0 - margin - x1);
            // the fit leaves lo <= hi up to rounding
            let dx = (want_x - (x0 + x1) / 2.0).max(lo).min(hi.max(lo));
            let dy = rng.random_range(0.0f64..1.0) * ((h - 1.0 - margin - y1) - (margin - y0)).max(0.0)
                + (margin - y0);
            for p in sk.iter_mut() {
                p[0] += dx;
                p[1] += dy;
            }
            spec.skeletons.push(sk);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.limb_bounds;
        for (n, sk) in self.skeletons.iter().enumerate() {
            for &(a, b) in &LIMBS {
                let len = ((sk[a][0] - sk[b][0]).powi(2) + (sk[a][1] - sk[b][1]).powi(2)).sqrt();
                if !(len >= lo && len <= hi) {
                    return Err(Error::Rejected(format!(
                        "instance {n}: limb {a}-{b} has length {len:.2}, outside [{lo}, {hi}]"
                    )));
                }
            }
            for p in sk {
                if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (self.width - 1) as f64 && p[1] <= (self.height - 1) as f64) {
                    return Err(Error::Rejected(format!("instance {n} leaves the frame")));
                }
            }
        }
        Ok(())
    }
}

fn bounds(sk: &[[f64; 2]; NUM_JOINTS]) -> (f64, f64, f64, f64) {
    let mut b = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in sk {
        b.0 = b.0.min(p[0]);
        b.1 = b.1.max(p[0]);
        b.2 = b.2.min(p[1]);
        b.3 = b.3.max(p[1]);
    }
    b
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

/// Pixel coverage of an anti-aliased capsule.
fn coverage(p: [f64; 2], a: [f64; 2], b: [f64; 2], r: f64) -> f64 {
    (r + 0.5 - segment_distance(p, a, b)).clamp(0.0, 1.0)
}

fn background(spec: &SceneSpec) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
    let (h, w) = (spec.height, spec.width);
    let base = match spec.profile {
        Profile::Outdoor => 0.38,
        Profile::Indoor => 0.26,
    };
    // low-frequency colour field on a coarse grid
    let (gh, gw) = (5, 4);
    let grid: Vec<[f64; 3]> = (0..gh * gw)
        .map(|_| std::array::from_fn(|_| base + rng.random_range(-0.12..0.12)))
        .collect();
    let mut img = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / (h - 1) as f64 * (gh - 1) as f64;
            let gx = x as f64 / (w - 1) as f64 * (gw - 1) as f64;
            let (y0, x0) = ((gy as usize).min(gh - 2), (gx as usize).min(gw - 2));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| grid[yy * gw + xx][c];
                let v = (at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx) * (1.0 - fy)
                    + (at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx) * fy;
                img.set(y, x, c, v);
            }
        }
    }
    // blocky clutter gives the aligner corners to latch onto
    for _ in 0..rng.random_range(6..12) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (bh, bw) = (rng.random_range(3..h / 3), rng.random_range(3..w / 3));
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.08..0.5));
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                for (c, v) in colour.iter().enumerate() {
                    img.set(y, x, c, *v);
                }
            }
        }
    }
    for v in img.data_mut() {
        *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    img
}

/// Renders the scene and returns its image and one annotation per figure.
/// Joints covered by a later figure are flagged as occluded.
pub fn render_well_lit(spec: &SceneSpec, rng_seed: u64) -> Result<(Image, Vec<PoseAnnotation>)> {
    if spec.n_instances() > spec.capacity() {
        return Err(Error::Rejected(format!(
            "{} instances exceed the frame capacity of {}",
            spec.n_instances(),
            spec.capacity()
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut img = background(spec);
    let mut anns: Vec<PoseAnnotation> = Vec::with_capacity(spec.n_instances());
    for (n, sk) in spec.skeletons.iter().enumerate() {
        let (x0, x1, y0, y1) = bounds(sk);
        let fh = (y1 - y0).max(1.0);
        let radius = |limb: (usize, usize)| match limb {
            (12, 13) => 0.065 * fh,
            (0, 6) | (1, 7) | (6, 7) | (0, 1) => 0.04 * fh,
            _ => 0.03 * fh,
        };
        let mut capsules = Vec::with_capacity(LIMBS.len());
        for (li, &limb) in LIMBS.iter().enumerate() {
            // distinct albedo per limb, lightly jittered per figure
            let hue = li as f64 / LIMBS.len() as f64 * std::f64::consts::TAU;
            let jitter = rng.random_range(0.9..1.05);
            let albedo: [f64; 3] = std::array::from_fn(|c| {
                let phase = hue + c as f64 * std::f64::consts::TAU / 3.0;
                ((0.78 + 0.2 * phase.cos()) * jitter).clamp(0.0, 1.0)
            });
            capsules.push((sk[limb.0], sk[limb.1], radius(limb).max(1.0), albedo));
        }
        let pad = 0.07 * fh + 2.0;
        let ys = ((y0 - pad).floor().max(0.0) as usize)..=((y1 + pad).ceil().min((spec.height - 1) as f64) as usize);
        let xs = ((x0 - pad).floor().max(0.0) as usize)..=((x1 + pad).ceil().min((spec.width - 1) as f64) as usize);
        for y in ys.clone() {
            for x in xs.clone() {
                let p = [x as f64, y as f64];
                for (a, b, r, albedo) in &capsules {
                    let cov = coverage(p, *a, *b, *r);
                    if cov > 0.0 {
                        for (c, al) in albedo.iter().enumerate() {
                            let v = img.get(y, x, c);
                            img.set(y, x, c, v * (1.0 - cov) + al * cov);
                        }
                    }
                }
            }
        }
        for prev in anns.iter_mut() {
            for j in prev.joints.iter_mut() {
                let hidden = capsules.iter().any(|(a, b, r, _)| coverage([j.x, j.y], *a, *b, *r) > 0.5);
                if hidden && j.v == 2 {
                    j.v = 1;
                }
            }
        }
        let margin = 0.065 * fh;
        let bx0 = (x0 - margin).max(0.0);
        let by0 = (y0 - margin).max(0.0);
        let bx1 = (x1 + margin).min((spec.width - 1) as f64);
        let by1 = (y1 + margin).min((spec.height - 1) as f64);
        anns.push(PoseAnnotation {
            joints: std::array::from_fn(|i| Joint {
                x: sk[i][0],
                y: sk[i][1],
                v: 2,
            }),
            bbox: [bx0, by0, bx1 - bx0, by1 - by0],
            instance_id: n as u64,
            scene_id: spec.scene_id.clone(),
        });
    }
    Ok((img, anns))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, instances: usize) -> Result<SceneSpec> {
        let cfg = SceneConfig {
            instances,
            ..SceneConfig::default()
        };
        SceneSpec::random("s", &cfg, Profile::Outdoor, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn deterministic_and_counted() {
        let s = spec(1, 1).unwrap();
        let (a, ann_a) = render_well_lit(&s, 7).unwrap();
        let (b, ann_b) = render_well_lit(&s, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ann_a, ann_b);
        assert_eq!(ann_a.len(), 1);
        assert_eq!(render_well_lit(&spec(2, 3).unwrap(), 0).unwrap().1.len(), 3);
    }

    #[test]
    fn joints_are_brighter_than_background() {
        for seed in 0..20 {
            let s = spec(seed, 1).unwrap();
            let (img, anns) = render_well_lit(&s, seed).unwrap();
            let lum = img.luminance();
            let mean = lum.iter().sum::<f64>() / lum.len() as f64;
            for j in &anns[0].joints {
                let (cx, cy) = (j.x.round() as i64, j.y.round() as i64);
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (x, y) = (cx + dx, cy + dy);
                        if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
                            acc += lum[y as usize * img.width() + x as usize];
                            n += 1.0;
                        }
                    }
                }
                assert!(acc / n > mean, "seed {seed}");
            }
            anns[0].validate(img.height(), img.width()).unwrap();
        }
    }

    #[test]
    fn annotations_match_skeleton_exactly() {
        let s = spec(4, 2).unwrap();
        let (_, anns) = render_well_lit(&s, 0).unwrap();
        for (ann, sk) in anns.iter().zip(&s.skeletons) {
            for (j, p) in ann.joints.iter().zip(sk) {
                assert_eq!([j.x, j.y], *p);
            }
        }
    }

    #[test]
    fn over_capacity_is_rejected() {
        assert!(matches!(spec(0, 5), Err(Error::Rejected(_))));
        let mut s = spec(0, 1).unwrap();
        let one = s.skeletons[0];
        s.skeletons = vec![one; 5];
        assert!(matches!(render_well_lit(&s, 0), Err(Error::Rejected(_))));
    }

    #[test]
    fn limb_bounds_enforced() {
        let mut s = spec(3, 1).unwrap();
        s.limb_bounds = (0.0, 1.0);
        assert!(matches!(s.validate(), Err(Error::Rejected(_))));
    }
}

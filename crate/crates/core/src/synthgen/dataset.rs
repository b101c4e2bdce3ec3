use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{render_well_lit, SceneConfig, SceneSpec, LIMBS};
use super::{degrade_to_low_light, CaptureConfig, ImagePair, Joint, PoseAnnotation, Profile, JOINT_NAMES};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::netcore::NUM_JOINTS;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub scene_id: String,
    pub pair_id: String,
    /// Relative to the dataset root.
    pub well_lit_path: String,
    pub low_light_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    pub exposure_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub profile: Profile,
    pub capture: CaptureConfig,
    pub scene: SceneConfig,
    pub annotation_file: String,
    pub pairs: Vec<PairRecord>,
}

/// One entry of the `images` array of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub scene_id: String,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    scene_id: String,
    instance_id: u64,
    keypoints: Vec<f64>,
    num_keypoints: usize,
    bbox: Vec<f64>,
    category_id: u64,
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Category {
    id: u64,
    name: String,
    keypoints: Vec<String>,
    skeleton: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    images: Vec<ImageEntry>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

fn serde_schema_error(context: &Path, e: &serde_json::Error) -> Error {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string());
    Error::schema(context.display().to_string(), field, msg)
}

/// Writes annotations in the CrowdPose-style layout.
pub fn save_annotations(path: &Path, images: &[ImageEntry], anns: &[PoseAnnotation]) -> Result<()> {
    let image_of: BTreeMap<&str, u64> = images.iter().map(|i| (i.scene_id.as_str(), i.id)).collect();
    let mut raw = Vec::with_capacity(anns.len());
    for (id, a) in anns.iter().enumerate() {
        let image_id = *image_of.get(a.scene_id.as_str()).ok_or_else(|| {
            Error::Contract(format!("annotation for scene {} has no image entry", a.scene_id))
        })?;
        raw.push(RawAnnotation {
            id: id as u64,
            image_id,
            scene_id: a.scene_id.clone(),
            instance_id: a.instance_id,
            keypoints: a.joints.iter().flat_map(|j| [j.x, j.y, j.v as f64]).collect(),
            num_keypoints: a.num_labelled(),
            bbox: a.bbox.to_vec(),
            category_id: 1,
            iscrowd: 0,
        });
    }
    let file = AnnotationFile {
        images: images.to_vec(),
        annotations: raw,
        categories: vec![Category {
            id: 1,
            name: "person".into(),
            keypoints: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            skeleton: LIMBS.iter().map(|&(a, b)| [a, b]).collect(),
        }],
    };
    let text = serde_json::to_string_pretty(&file).expect("annotations serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads and validates an annotation file.
pub fn load_annotations(path: &Path) -> Result<(Vec<ImageEntry>, Vec<PoseAnnotation>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| serde_schema_error(path, &e))?;
    let sizes: BTreeMap<&str, (usize, usize)> = file
        .images
        .iter()
        .map(|i| (i.scene_id.as_str(), (i.height, i.width)))
        .collect();
    let mut out = Vec::with_capacity(file.annotations.len());
    for (n, raw) in file.annotations.iter().enumerate() {
        let ctx = format!("{} annotations[{n}]", path.display());
        if raw.keypoints.len() != 3 * NUM_JOINTS {
            return Err(Error::schema(
                ctx,
                "keypoints",
                format!(
                    "expected {} values ({NUM_JOINTS} joints), got {} ({} joints)",
                    3 * NUM_JOINTS,
                    raw.keypoints.len(),
                    raw.keypoints.len() / 3
                ),
            ));
        }
        if raw.bbox.len() != 4 {
            return Err(Error::schema(ctx, "bbox", format!("expected 4 values, got {}", raw.bbox.len())));
        }
        let mut joints = [Joint { x: 0.0, y: 0.0, v: 0 }; NUM_JOINTS];
        for (i, j) in joints.iter_mut().enumerate() {
            let v = raw.keypoints[3 * i + 2];
            if !(v == 0.0 || v == 1.0 || v == 2.0) {
                return Err(Error::schema(ctx, "keypoints", format!("joint {i} has visibility {v}")));
            }
            *j = Joint {
                x: raw.keypoints[3 * i],
                y: raw.keypoints[3 * i + 1],
                v: v as u8,
            };
        }
        let ann = PoseAnnotation {
            joints,
            bbox: [raw.bbox[0], raw.bbox[1], raw.bbox[2], raw.bbox[3]],
            instance_id: raw.instance_id,
            scene_id: raw.scene_id.clone(),
        };
        let &(h, w) = sizes
            .get(raw.scene_id.as_str())
            .ok_or_else(|| Error::schema(&ctx, "scene_id", format!("no image entry for {}", raw.scene_id)))?;
        ann.validate(h, w).map_err(|e| match e {
            Error::Schema { field, reason, .. } => Error::schema(ctx.clone(), field, reason),
            other => other,
        })?;
        out.push(ann);
    }
    Ok((file.images, out))
}

/// A loaded dataset; images are decoded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    manifest_hash: String,
    annotations: BTreeMap<String, Vec<PoseAnnotation>>,
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.manifest.pairs
    }

    pub fn len(&self) -> usize {
        self.manifest.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.pairs.is_empty()
    }

    /// SHA-256 of the manifest file, hex encoded.
    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn annotations(&self, scene_id: &str) -> &[PoseAnnotation] {
        self.annotations.get(scene_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn load_pair(&self, idx: usize) -> Result<ImagePair> {
        let rec = self.manifest.pairs.get(idx).ok_or_else(|| {
            Error::Contract(format!("pair index {idx} out of range ({} pairs)", self.len()))
        })?;
        let well_lit = Image::load_png(&self.root.join(&rec.well_lit_path))?;
        let low_light = Image::load_png(&self.root.join(&rec.low_light_path))?;
        if (well_lit.height(), well_lit.width()) != (low_light.height(), low_light.width()) {
            return Err(Error::Shape(format!(
                "pair {}: well-lit {}x{} vs low-light {}x{}",
                rec.pair_id,
                well_lit.height(),
                well_lit.width(),
                low_light.height(),
                low_light.width()
            )));
        }
        Ok(ImagePair {
            well_lit,
            low_light,
            gain: rec.gain.unwrap_or(f64::NAN),
            exposure_factor: rec.exposure_factor,
            scene_id: rec.scene_id.clone(),
            pair_id: rec.pair_id.clone(),
        })
    }

    /// Keeps only the pairs selected by `keep` (annotations are retained).
    pub fn filter(&self, keep: impl Fn(&PairRecord) -> bool) -> Dataset {
        let mut out = self.clone();
        out.manifest.pairs.retain(|p| keep(p));
        out
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Accepts the dataset directory or the manifest file itself.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| serde_schema_error(&manifest_path, &e))?;
    let ctx = manifest_path.display().to_string();
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::schema(
            ctx,
            "format_version",
            format!("expected {FORMAT_VERSION}, got {}", manifest.format_version),
        ));
    }
    manifest.capture.validate()?;
    let (_, anns) = load_annotations(&root.join(&manifest.annotation_file))?;
    let mut annotations: BTreeMap<String, Vec<PoseAnnotation>> = BTreeMap::new();
    for a in anns {
        annotations.entry(a.scene_id.clone()).or_default().push(a);
    }
    for (n, rec) in manifest.pairs.iter().enumerate() {
        for rel in [&rec.well_lit_path, &rec.low_light_path] {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image referenced by the manifest is missing"),
                ));
            }
        }
        if !(rec.exposure_factor >= 1.0) {
            return Err(Error::schema(&ctx, format!("pairs[{n}].exposure_factor"), "must be >= 1"));
        }
        if !annotations.contains_key(&rec.scene_id) {
            return Err(Error::schema(
                &ctx,
                format!("pairs[{n}].scene_id"),
                format!("scene {} has no annotations", rec.scene_id),
            ));
        }
    }
    Ok(Dataset {
        root,
        manifest,
        manifest_hash: hex(&Sha256::digest(&bytes)),
        annotations,
    })
}

/// Renders `n_scenes` scenes and writes one pair per ladder entry of each.
pub fn generate_dataset(
    n_scenes: usize,
    capture: &CaptureConfig,
    scene: &SceneConfig,
    profile: Profile,
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest> {
    capture.validate()?;
    scene.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut pairs = Vec::with_capacity(n_scenes * capture.exposure_ladder.len());
    let mut entries = Vec::with_capacity(n_scenes);
    let mut all_anns = Vec::new();
    for i in 0..n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let scene_id = format!("s{i:05}");
        let spec = SceneSpec::random(&scene_id, scene, profile, &mut rng)?;
        let (well, anns) = render_well_lit(&spec, rng.random())?;
        let well_rel = format!("images/{scene_id}_wl.png");
        well.save_png(&out_dir.join(&well_rel), capture.bit_depth)?;
        let base_gain = rng.random_range(capture.gain_range.0..=capture.gain_range.1);
        for &factor in &capture.exposure_ladder {
            let low = degrade_to_low_light(&well, capture, factor, rng.random())?;
            let pair_id = format!("{scene_id}_x{factor}");
            let low_rel = format!("images/{pair_id}_ll.png");
            low.save_png(&out_dir.join(&low_rel), capture.bit_depth)?;
            pairs.push(PairRecord {
                scene_id: scene_id.clone(),
                pair_id,
                well_lit_path: well_rel.clone(),
                low_light_path: low_rel,
                gain: Some(base_gain * factor),
                exposure_factor: factor,
            });
        }
        entries.push(ImageEntry {
            id: i as u64,
            scene_id,
            file_name: well_rel,
            height: scene.height,
            width: scene.width,
        });
        all_anns.extend(anns);
    }
    save_annotations(&out_dir.join(ANNOTATION_FILE), &entries, &all_anns)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        profile,
        capture: capture.clone(),
        scene: scene.clone(),
        annotation_file: ANNOTATION_FILE.into(),
        pairs,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene() -> SceneConfig {
        SceneConfig {
            height: 48,
            width: 36,
            figure_height: (30.0, 40.0),
            ..SceneConfig::default()
        }
    }

    #[test]
    fn counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cap = CaptureConfig::default();
        let m = generate_dataset(10, &cap, &small_scene(), Profile::Outdoor, dir.path(), 3).unwrap();
        assert_eq!(m.pairs.len(), 50);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 50);
        let hash = ds.manifest_hash().to_string();

        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(10, &cap, &small_scene(), Profile::Outdoor, dir2.path(), 3).unwrap();
        assert_eq!(load_dataset(dir2.path()).unwrap().manifest_hash(), hash);
        let a = fs::read(dir.path().join("images/s00007_x8_ll.png")).unwrap();
        let b = fs::read(dir2.path().join("images/s00007_x8_ll.png")).unwrap();
        assert_eq!(a, b);

        let empty = tempfile::tempdir().unwrap();
        let m = generate_dataset(0, &cap, &small_scene(), Profile::Indoor, empty.path(), 3).unwrap();
        assert!(m.pairs.is_empty());
        assert!(load_dataset(empty.path()).unwrap().is_empty());
    }

    #[test]
    fn gain_grows_with_exposure_reduction_and_means_fall() {
        let dir = tempfile::tempdir().unwrap();
        let cap = CaptureConfig {
            bit_depth: 16,
            ..CaptureConfig::default()
        };
        generate_dataset(2, &cap, &small_scene(), Profile::Outdoor, dir.path(), 1).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        for scene in ds.pairs().chunks(5) {
            let gains: Vec<f64> = scene.iter().map(|p| p.gain.unwrap()).collect();
            assert!(gains.windows(2).all(|w| w[0] < w[1]));
        }
        let means: Vec<f64> = (0..5).map(|i| ds.load_pair(i).unwrap().low_light.mean()).collect();
        assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
        let pair = ds.load_pair(0).unwrap();
        assert_eq!(pair.well_lit.height(), pair.low_light.height());
    }

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let images = vec![ImageEntry {
            id: 0,
            scene_id: "s0".into(),
            file_name: "x.png".into(),
            height: 40,
            width: 30,
        }];
        let ann = PoseAnnotation {
            joints: std::array::from_fn(|i| Joint {
                x: i as f64,
                y: 2.0 * i as f64,
                v: (i % 3) as u8,
            }),
            bbox: [1.0, 2.0, 20.0, 30.0],
            instance_id: 4,
            scene_id: "s0".into(),
        };
        save_annotations(&path, &images, std::slice::from_ref(&ann)).unwrap();
        let (imgs, anns) = load_annotations(&path).unwrap();
        assert_eq!(imgs, images);
        assert_eq!(anns, vec![ann]);
    }

    #[test]
    fn schema_violations_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let cap = CaptureConfig::default();
        generate_dataset(1, &cap, &small_scene(), Profile::Outdoor, dir.path(), 0).unwrap();
        let ann_path = dir.path().join(ANNOTATION_FILE);
        let text = fs::read_to_string(&ann_path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let kp = v["annotations"][0]["keypoints"].as_array_mut().unwrap();
        kp.truncate(39);
        fs::write(&ann_path, v.to_string()).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "keypoints"),
            other => panic!("{other:?}"),
        }
        fs::write(&ann_path, text).unwrap();

        fs::remove_file(dir.path().join("images/s00000_x4_ll.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("s00000_x4_ll.png"), "{err}");

        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m["pairs"][0].as_object_mut().unwrap().remove("exposure_factor");
        fs::write(&mpath, m.to_string()).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "exposure_factor"),
            other => panic!("{other:?}"),
        }
    }
}

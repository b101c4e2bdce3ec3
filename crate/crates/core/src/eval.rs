//! Keypoint-similarity AP and the gain-based low-light splits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::netcore::{Checkpoint, LightingCondition, Mode, PoseNet, NUM_JOINTS};
use crate::synthgen::{Dataset, PoseAnnotation};
use crate::tensor::Tensor;
use crate::train::{crop_and_augment, heatmap_to_input, prepare_low_light, CropConfig, CropTransform};

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub const OKS_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub type Joints = [[f64; 2]; NUM_JOINTS];

pub const DEFAULT_OKS_K: f64 = 0.08;

/// Object keypoint similarity of `pred` against `gt`: mean over labelled
/// joints of `exp(-d^2 / (2 s^2 k^2))` with `s^2` the box area.
pub fn oks(pred: &Joints, gt: &PoseAnnotation, k: &[f64; NUM_JOINTS]) -> Result<f64> {
    let s2 = gt.bbox[2] * gt.bbox[3];
    if !(s2 > 0.0) {
        return Err(Error::Degenerate(format!("instance {} has an empty box", gt.instance_id)));
    }
    let (mut sum, mut n) = (0.0, 0);
    for (i, j) in gt.joints.iter().enumerate() {
        if j.v == 0 {
            continue;
        }
        let dx = pred[i][0] - j.x;
        let dy = pred[i][1] - j.y;
        sum += (-(dx * dx + dy * dy) / (2.0 * s2 * k[i] * k[i])).exp();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate(format!("instance {} has no labelled joints", gt.instance_id)));
    }
    Ok(sum / n as f64)
}

/// One scored pose hypothesis for an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: String,
    /// Tie-breaker among equal scores within an image.
    pub key: u64,
    pub score: f64,
    pub joints: Joints,
}

/// Ground truth grouped by image.
pub type GroundTruth = BTreeMap<String, Vec<PoseAnnotation>>;

/// Per-threshold AP with the bookkeeping the report needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    /// `None` when there is no usable ground truth.
    pub per_threshold: [Option<f64>; 10],
    pub instances: usize,
    /// Ground-truth instances without labelled joints.
    pub skipped: usize,
}

impl ApResult {
    /// Mean over the thresholds.
    pub fn ap(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.per_threshold.iter().copied().collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn sorted_detections(dets: &[Detection]) -> Result<Vec<&Detection>> {
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::Contract(format!("detection on {} has score {}", d.image, d.score)));
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image.cmp(&b.image))
            .then_with(|| a.key.cmp(&b.key))
    });
    Ok(order)
}

/// Area under the precision envelope sampled at recall 0, 0.01, ..., 1.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while idx < recall.len() && recall[idx] < level - 1e-12 {
            idx += 1;
        }
        if idx < recall.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Greedy matching in descending score order at every OKS threshold.
pub fn average_precision(dets: &[Detection], gts: &GroundTruth, k: &[f64; NUM_JOINTS]) -> Result<ApResult> {
    // usable ground truth and its OKS against every detection of the image
    let mut usable: BTreeMap<&str, Vec<&PoseAnnotation>> = BTreeMap::new();
    let mut skipped = 0;
    for (img, anns) in gts {
        let mut list: Vec<&PoseAnnotation> = Vec::new();
        for a in anns {
            if a.num_labelled() == 0 {
                skipped += 1;
            } else {
                list.push(a);
            }
        }
        list.sort_by_key(|a| a.instance_id);
        usable.insert(img, list);
    }
    let n_gt: usize = usable.values().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(ApResult {
            per_threshold: [None; 10],
            instances: 0,
            skipped,
        });
    }
    let order = sorted_detections(dets)?;
    let sims: Vec<Vec<f64>> = order
        .iter()
        .map(|d| match usable.get(d.image.as_str()) {
            Some(list) => list.iter().map(|g| oks(&d.joints, g, k)).collect(),
            None => Ok(Vec::new()),
        })
        .collect::<Result<_>>()?;
    let mut per_threshold = [None; 10];
    for (ti, &thr) in OKS_THRESHOLDS.iter().enumerate() {
        let mut taken: BTreeMap<&str, Vec<bool>> =
            usable.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
        let mut tp = Vec::with_capacity(order.len());
        for (d, s) in order.iter().zip(&sims) {
            let mut best: Option<usize> = None;
            if let Some(used) = taken.get_mut(d.image.as_str()) {
                for (gi, &o) in s.iter().enumerate() {
                    if used[gi] || o < thr {
                        continue;
                    }
                    if best.is_none_or(|b| o > s[b]) {
                        best = Some(gi);
                    }
                }
                if let Some(b) = best {
                    used[b] = true;
                }
            }
            tp.push(best.is_some());
        }
        per_threshold[ti] = Some(interpolated_ap(&tp, n_gt));
    }
    Ok(ApResult {
        per_threshold,
        instances: n_gt,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "LL-N")]
    LlN,
    #[serde(rename = "LL-H")]
    LlH,
    #[serde(rename = "LL-E")]
    LlE,
    #[serde(rename = "LL-A")]
    LlA,
    #[serde(rename = "WL")]
    Wl,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::LlN, Split::LlH, Split::LlE, Split::LlA, Split::Wl];

    pub fn label(self) -> &'static str {
        match self {
            Split::LlN => "LL-N",
            Split::LlH => "LL-H",
            Split::LlE => "LL-E",
            Split::LlA => "LL-A",
            Split::Wl => "WL",
        }
    }
}

/// Gain thresholds separating normal, hard and extreme low light. Higher gain
/// means a darker scene; both bounds are inclusive on the lower split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub thresholds: (f64, f64),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { thresholds: (15.0, 24.0) }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.thresholds;
        if !(a < b && a.is_finite() && b.is_finite()) {
            return Err(Error::Config(format!("split thresholds must be increasing, got ({a}, {b})")));
        }
        Ok(())
    }

    pub fn assign(&self, gain: Option<f64>) -> Result<Split> {
        let g = gain.ok_or_else(|| Error::Metadata("pair has no gain value".into()))?;
        if !g.is_finite() {
            return Err(Error::Metadata(format!("pair has gain {g}")));
        }
        let (t1, t2) = self.thresholds;
        Ok(if g <= t1 {
            Split::LlN
        } else if g <= t2 {
            Split::LlH
        } else {
            Split::LlE
        })
    }
}

/// Joint locations in input pixels and a confidence per sample of a
/// `[N, K, h, w]` heatmap batch. Each joint is the argmax moved a quarter
/// pixel towards its strongest neighbour; the score is the mean peak value.
pub fn decode(heatmaps: &Tensor) -> Result<Vec<(Joints, f64)>> {
    let (n, k, h, w) = heatmaps.dims4()?;
    if k != NUM_JOINTS {
        return Err(Error::Shape(format!("expected {NUM_JOINTS} heatmaps, got {k}")));
    }
    let d = heatmaps.data();
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut joints = [[0.0; 2]; NUM_JOINTS];
        let mut score = 0.0;
        for (j, joint) in joints.iter_mut().enumerate() {
            let ch = &d[(s * k + j) * h * w..(s * k + j + 1) * h * w];
            let (mut best, mut peak) = (0, f64::NEG_INFINITY);
            for (i, &v) in ch.iter().enumerate() {
                if v > peak {
                    best = i;
                    peak = v;
                }
            }
            let (py, px) = ((best / w) as isize, (best % w) as isize);
            let mut nb: Option<(f64, isize, isize)> = None;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (y, x) = (py + dy, px + dx);
                    if (dy, dx) == (0, 0) || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let v = ch[y as usize * w + x as usize];
                    if nb.is_none_or(|(b, _, _)| v > b) {
                        nb = Some((v, dy, dx));
                    }
                }
            }
            let (mut u, mut v) = (px as f64, py as f64);
            if let Some((_, dy, dx)) = nb {
                let len = ((dx * dx + dy * dy) as f64).sqrt();
                u += 0.25 * dx as f64 / len;
                v += 0.25 * dy as f64 / len;
            }
            *joint = [heatmap_to_input(u), heatmap_to_input(v)];
            score += peak;
        }
        out.push((joints, score / NUM_JOINTS as f64));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: SplitSpec,
    pub oks_k: [f64; NUM_JOINTS],
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            splits: SplitSpec::default(),
            oks_k: [DEFAULT_OKS_K; NUM_JOINTS],
            batch_size: 32,
        }
    }
}

/// Network-side preprocessing switches, recovered from checkpoint metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSettings {
    pub input_size: (usize, usize),
    pub crop_margin: f64,
    pub intensity_scaling: bool,
    pub target_mean_intensity: f64,
}

impl InputSettings {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        let field = |name: &str| meta.get(name);
        let num = |name: &str, default: f64| -> Result<f64> {
            match field(name) {
                None => Ok(default),
                Some(v) => v
                    .as_f64()
                    .ok_or_else(|| Error::Contract(format!("checkpoint metadata `{name}` is not a number"))),
            }
        };
        let intensity_scaling = match field("intensity_scaling") {
            None => true,
            Some(v) => v
                .as_bool()
                .ok_or_else(|| Error::Contract("checkpoint metadata `intensity_scaling` is not a boolean".into()))?,
        };
        if let Some(model) = meta.get("train_config").and_then(|t| t.get("model")) {
            let size = model.get("input_size").cloned();
            let expect = serde_json::to_value(ck.net.config().input_size).expect("tuple serializes");
            if size.as_ref() != Some(&expect) {
                return Err(Error::Contract(format!(
                    "checkpoint metadata describes input size {:?} but the network expects {expect}",
                    size
                )));
            }
        }
        Ok(InputSettings {
            input_size: ck.net.config().input_size,
            crop_margin: num("crop_margin", 1.25)?,
            intensity_scaling,
            target_mean_intensity: num("target_mean_intensity", 0.4)?,
        })
    }
}

/// One crop handed to a predictor.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub image: String,
    pub split: Split,
    pub condition: LightingCondition,
    pub input: Image,
    pub transform: CropTransform,
    /// Ground truth in image coordinates.
    pub annotation: PoseAnnotation,
}

impl EvalSample {
    /// Ground truth mapped into input coordinates.
    pub fn input_annotation(&self) -> PoseAnnotation {
        self.transform.transform_annotation(&self.annotation)
    }
}

/// Crops every annotated instance: low-light pairs once per pair, well-lit
/// images once per scene. Samples are ordered by image name so the result
/// does not depend on manifest order.
pub fn eval_samples(data: &Dataset, settings: &InputSettings, cfg: &EvalConfig) -> Result<Vec<EvalSample>> {
    cfg.splits.validate()?;
    let crop = CropConfig {
        margin: settings.crop_margin,
        scale_range: (1.0, 1.0),
    };
    // assign every split before touching pixels so metadata errors surface first
    let mut recs: Vec<(usize, Split)> = Vec::with_capacity(data.len());
    for (i, rec) in data.pairs().iter().enumerate() {
        let split = cfg.splits.assign(rec.gain).map_err(|e| match e {
            Error::Metadata(m) => Error::Metadata(format!("{}: {m}", rec.pair_id)),
            other => other,
        })?;
        recs.push((i, split));
    }
    recs.sort_by(|a, b| data.pairs()[a.0].pair_id.cmp(&data.pairs()[b.0].pair_id));
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut out = Vec::new();
    let mut wl_seen = std::collections::BTreeSet::new();
    let mut wl = Vec::new();
    for (i, split) in recs {
        let pair = data.load_pair(i)?;
        let anns = data.annotations(&pair.scene_id);
        let first_wl = wl_seen.insert(pair.scene_id.clone());
        for ann in anns {
            let c = crop_and_augment(&pair.well_lit, &pair.low_light, ann, settings.input_size, &crop, &mut rng)?;
            out.push(EvalSample {
                image: pair.pair_id.clone(),
                split,
                condition: LightingCondition::LowLight,
                input: prepare_low_light(&c.student, settings.intensity_scaling, settings.target_mean_intensity),
                transform: c.transform,
                annotation: ann.clone(),
            });
            if first_wl {
                wl.push(EvalSample {
                    image: pair.scene_id.clone(),
                    split: Split::Wl,
                    condition: LightingCondition::WellLit,
                    input: c.teacher,
                    transform: c.transform,
                    annotation: ann.clone(),
                });
            }
        }
    }
    wl.sort_by(|a, b| a.image.cmp(&b.image).then(a.annotation.instance_id.cmp(&b.annotation.instance_id)));
    out.extend(wl);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    /// AP@0.5:0.95 x 100; absent without ground truth.
    pub ap: Option<f64>,
    /// Keyed by threshold, formatted with two decimals.
    pub ap_at: BTreeMap<String, Option<f64>>,
    pub images: usize,
    pub instances: usize,
    pub skipped_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitReport>,
}

impl EvalReport {
    pub fn get(&self, split: Split) -> &SplitReport {
        self.splits.iter().find(|s| s.split == split).expect("every split is reported")
    }

    pub fn ap(&self, split: Split) -> Option<f64> {
        self.get(split).ap
    }
}

/// Scores every sample with `predict` (called on batches of at most
/// `cfg.batch_size` samples of one condition, returning input-coordinate
/// joints and a confidence per sample) and assembles the report.
pub fn evaluate_with<F>(samples: &[EvalSample], cfg: &EvalConfig, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&[EvalSample]) -> Result<Vec<(Joints, f64)>>,
{
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut dets: BTreeMap<Split, Vec<Detection>> = BTreeMap::new();
    let mut gts: BTreeMap<Split, GroundTruth> = BTreeMap::new();
    let mut start = 0;
    while start < samples.len() {
        let cond = samples[start].condition;
        let mut end = start;
        while end < samples.len() && end - start < cfg.batch_size && samples[end].condition == cond {
            end += 1;
        }
        let chunk = &samples[start..end];
        let preds = predict(chunk)?;
        if preds.len() != chunk.len() {
            return Err(Error::Contract(format!(
                "predictor returned {} results for {} samples",
                preds.len(),
                chunk.len()
            )));
        }
        for (s, (joints, score)) in chunk.iter().zip(preds) {
            let joints = joints.map(|p| s.transform.to_image(p));
            let mut targets = vec![s.split];
            if s.split != Split::Wl {
                targets.push(Split::LlA);
            }
            for t in targets {
                dets.entry(t).or_default().push(Detection {
                    image: s.image.clone(),
                    key: s.annotation.instance_id,
                    score,
                    joints,
                });
                gts.entry(t).or_default().entry(s.image.clone()).or_default().push(s.annotation.clone());
            }
        }
        start = end;
    }
    let mut splits = Vec::with_capacity(5);
    for split in Split::ALL {
        let empty = GroundTruth::new();
        let g = gts.get(&split).unwrap_or(&empty);
        let r = average_precision(dets.get(&split).map(Vec::as_slice).unwrap_or(&[]), g, &cfg.oks_k)?;
        let ap_at = OKS_THRESHOLDS
            .iter()
            .zip(r.per_threshold)
            .map(|(t, v)| (format!("{t:.2}"), v.map(|v| 100.0 * v)))
            .collect();
        splits.push(SplitReport {
            split,
            ap: r.ap().map(|v| 100.0 * v),
            ap_at,
            images: g.len(),
            instances: r.instances,
            skipped_instances: r.skipped,
        });
    }
    Ok(EvalReport { splits })
}

/// Runs the network on `samples`: student path on low-light crops, teacher
/// path on well-lit ones, decoding the refined heatmaps.
pub fn network_predictor(net: &mut PoseNet) -> impl FnMut(&[EvalSample]) -> Result<Vec<(Joints, f64)>> + '_ {
    move |chunk: &[EvalSample]| {
        let tensors: Vec<Tensor> = chunk.iter().map(|s| s.input.to_tensor()).collect();
        let batch = Tensor::cat_batch(&tensors.iter().collect::<Vec<_>>())?;
        let pred = net.predict(&batch, chunk[0].condition, Mode::Eval)?;
        decode(&pred.refine)
    }
}

/// Evaluates a checkpoint on every split of `data`.
pub fn evaluate(ck: &mut Checkpoint, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let settings = InputSettings::from_checkpoint(ck)?;
    let samples = eval_samples(data, &settings, cfg)?;
    evaluate_with(&samples, cfg, network_predictor(&mut ck.net))
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table with one row per named report and the split columns.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "Method");
    for s in Split::ALL {
        out.push_str(&format!(" | {:>5}", s.label()));
    }
    out.push('\n');
    out.push_str(&"-".repeat(width + Split::ALL.len() * 8));
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!("{name:<width$}"));
        for s in Split::ALL {
            out.push_str(&format!(" | {:>5}", cell(r.ap(s))));
        }
        out.push('\n');
    }
    out
}

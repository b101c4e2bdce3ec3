//! Preprocessing, the paired teacher/student training loop and the baseline
//! and ablation variants.

mod optim;
mod preprocess;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::losses::{lupi_node, pose_loss_node, LupiConfig, LupiMode};
use crate::netcore::{save_checkpoint, Binding, LightingCondition, Mode, ModelConfig, NormKind, PoseNet, NUM_JOINTS};
use crate::synthgen::Dataset;
use crate::tensor::Tensor;

pub use optim::Adam;
pub use preprocess::{
    crop_and_augment, heatmap_to_input, input_to_heatmap, intensity_scale, make_target_heatmaps, CropConfig,
    CropSample, CropTransform, TargetHeatmapSpec, HEATMAP_STRIDE,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.ndjson";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// LSBN plus the Gram LUPI loss.
    Ours,
    LsbnOnly,
    /// Shared BN with LUPI.
    LupiOnly,
    BaselineLow,
    BaselineWell,
    /// Shared BN on mixed low-light and well-lit batches.
    BaselineAll,
    LupiFeat,
    /// Ours without intensity scaling of low-light inputs.
    NoScaling,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Ours,
        Variant::LsbnOnly,
        Variant::LupiOnly,
        Variant::BaselineLow,
        Variant::BaselineWell,
        Variant::BaselineAll,
        Variant::LupiFeat,
        Variant::NoScaling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::LsbnOnly => "lsbn_only",
            Variant::LupiOnly => "lupi_only",
            Variant::BaselineLow => "baseline_low",
            Variant::BaselineWell => "baseline_well",
            Variant::BaselineAll => "baseline_all",
            Variant::LupiFeat => "lupi_feat",
            Variant::NoScaling => "no_scaling",
        }
    }

    pub fn norm(self) -> NormKind {
        match self {
            Variant::Ours | Variant::LsbnOnly | Variant::LupiFeat | Variant::NoScaling => NormKind::Lsbn,
            _ => NormKind::Plain,
        }
    }

    /// Whether the LUPI term contributes to the objective.
    pub fn uses_lupi(self) -> bool {
        matches!(self, Variant::Ours | Variant::LupiOnly | Variant::LupiFeat | Variant::NoScaling)
    }

    /// Teacher and student run as separate forwards and the LUPI discrepancy
    /// is at least measured.
    pub fn two_stream(self) -> bool {
        !matches!(self, Variant::BaselineLow | Variant::BaselineWell | Variant::BaselineAll)
    }

    pub fn trains_low_light(self) -> bool {
        self != Variant::BaselineWell
    }

    pub fn trains_well_lit(self) -> bool {
        self != Variant::BaselineLow
    }

    pub fn intensity_scaling(self) -> bool {
        self != Variant::NoScaling
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub batch_per_condition: usize,
    pub epochs: usize,
    pub seed: u64,
    pub target_mean_intensity: f64,
    pub scale_augment_range: (f64, f64),
    pub crop_margin: f64,
    pub heatmap_sigma: f64,
    pub lupi: LupiConfig,
    pub variant: Variant,
    /// The norm kind is overridden by the variant and the seed by `seed`.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            lr_decay: 0.5,
            lr_decay_every: 6,
            weight_decay: 1e-5,
            batch_per_condition: 32,
            epochs: 12,
            seed: 0,
            target_mean_intensity: 0.4,
            scale_augment_range: (0.7, 1.35),
            crop_margin: 1.25,
            heatmap_sigma: 2.0,
            lupi: LupiConfig::default(),
            variant: Variant::Ours,
            model: ModelConfig::benchmark(),
        }
    }
}

impl TrainConfig {
    /// Short-schedule settings for the synthetic benchmark: smaller batches,
    /// a higher learning rate and a LUPI weight sized for the toy network,
    /// whose Gram discrepancies are much smaller than the pose loss.
    pub fn benchmark(variant: Variant, seed: u64) -> Self {
        let mut cfg = TrainConfig {
            lr: 2e-3,
            lr_decay_every: 5,
            batch_per_condition: 16,
            epochs: 8,
            seed,
            variant,
            ..TrainConfig::default()
        };
        cfg.lupi.weight = 10.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "lr_decay must lie in (0, 1] and lr_decay_every must be at least 1".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_per_condition == 0 {
            return Err(Error::Config("batch_per_condition must be at least 1".into()));
        }
        if !(self.target_mean_intensity > 0.0 && self.target_mean_intensity <= 1.0) {
            return Err(Error::Config(format!(
                "target_mean_intensity must lie in (0, 1], got {}",
                self.target_mean_intensity
            )));
        }
        let (lo, hi) = self.scale_augment_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid scale_augment_range ({lo}, {hi})")));
        }
        if !(self.crop_margin > 0.0) || !(self.heatmap_sigma > 0.0) {
            return Err(Error::Config("crop_margin and heatmap_sigma must be positive".into()));
        }
        self.lupi.validate()?;
        self.resolved_model().validate()
    }

    /// Step size during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            norm: self.variant.norm(),
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// LUPI settings with the variant applied.
    pub fn resolved_lupi(&self) -> LupiConfig {
        let mut l = self.lupi.clone();
        if self.variant == Variant::LupiFeat {
            l.mode = LupiMode::Feat;
        }
        if !self.variant.uses_lupi() {
            l.weight = 0.0;
        }
        l
    }

    pub fn crop(&self) -> CropConfig {
        CropConfig {
            margin: self.crop_margin,
            scale_range: self.scale_augment_range,
        }
    }

    pub fn crop_eval(&self) -> CropConfig {
        CropConfig {
            margin: self.crop_margin,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn heatmap_spec(&self) -> TargetHeatmapSpec {
        TargetHeatmapSpec {
            sigma: self.heatmap_sigma,
            size: self.model.heatmap_size(),
        }
    }
}

/// Low-light network input: intensity-scaled unless disabled. A crop that is
/// entirely black cannot be rescaled and is passed through unchanged.
pub fn prepare_low_light(crop: &Image, scaling: bool, target: f64) -> Image {
    if !scaling {
        return crop.clone();
    }
    intensity_scale(crop, target).unwrap_or_else(|_| crop.clone())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub pose_loss_s: Option<f64>,
    pub pose_loss_t: Option<f64>,
    /// Unweighted discrepancy; absent for single-stream baselines.
    pub lupi_loss: Option<f64>,
    pub lr: f64,
}

/// Prepared tensors for one optimization step; sample `i` of `student` and
/// `teacher` comes from the same pair and crop.
#[derive(Clone, Debug)]
pub struct Batch {
    pub student: Tensor,
    pub teacher: Tensor,
    pub targets: Tensor,
    pub visible: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A training sample: one annotated instance of one pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub pair: usize,
    pub instance: usize,
}

pub fn sample_index(data: &Dataset) -> Vec<SampleRef> {
    let mut out = Vec::new();
    for (pair, rec) in data.pairs().iter().enumerate() {
        for instance in 0..data.annotations(&rec.scene_id).len() {
            out.push(SampleRef { pair, instance });
        }
    }
    out
}

/// Loads, crops and converts the samples of one batch.
pub fn build_batch(data: &Dataset, samples: &[SampleRef], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let input = cfg.model.input_size;
    let crop_cfg = cfg.crop();
    let spec = cfg.heatmap_spec();
    let (mut s, mut t, mut y) = (Vec::new(), Vec::new(), Vec::new());
    let mut visible = Vec::with_capacity(samples.len() * NUM_JOINTS);
    for r in samples {
        let pair = data.load_pair(r.pair)?;
        let ann = &data.annotations(&pair.scene_id)[r.instance];
        let crop = crop_and_augment(&pair.well_lit, &pair.low_light, ann, input, &crop_cfg, rng)?;
        let low = prepare_low_light(&crop.student, cfg.variant.intensity_scaling(), cfg.target_mean_intensity);
        let (target, mask) = make_target_heatmaps(&crop.annotation, &spec)?;
        s.push(low.to_tensor());
        t.push(crop.teacher.to_tensor());
        y.push(target);
        visible.extend_from_slice(&mask);
    }
    let (hh, hw) = spec.size;
    let mut yd = Vec::with_capacity(y.len() * NUM_JOINTS * hh * hw);
    for m in &y {
        yd.extend_from_slice(m.data());
    }
    Ok(Batch {
        student: Tensor::cat_batch(&s.iter().collect::<Vec<_>>())?,
        teacher: Tensor::cat_batch(&t.iter().collect::<Vec<_>>())?,
        targets: Tensor::from_vec(&[samples.len(), NUM_JOINTS, hh, hw], yd)?,
        visible,
    })
}

/// Loss nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepGraph {
    pub pose_s: Option<Var>,
    pub pose_t: Option<Var>,
    pub lupi: Option<Var>,
    pub total: Var,
}

fn head_loss(g: &mut Graph, global: Var, refine: Var, target: &Tensor, visible: &[bool]) -> Result<Var> {
    let a = pose_loss_node(g, global, target, visible)?;
    let b = pose_loss_node(g, refine, target, visible)?;
    g.add(a, b)
}

/// Builds the variant's objective for `batch` on `g`.
pub fn build_step(
    g: &mut Graph,
    bind: &mut Binding,
    net: &mut PoseNet,
    batch: &Batch,
    variant: Variant,
    lupi: &LupiConfig,
) -> Result<StepGraph> {
    let n = batch.len();
    let low = vec![LightingCondition::LowLight; n];
    let well = vec![LightingCondition::WellLit; n];
    let (pose_s, pose_t, lupi_var) = match variant {
        Variant::BaselineLow => {
            let x = g.constant(batch.student.clone());
            let o = net.forward(g, bind, x, &low, Mode::Train)?;
            (Some(head_loss(g, o.global, o.refine, &batch.targets, &batch.visible)?), None, None)
        }
        Variant::BaselineWell => {
            let x = g.constant(batch.teacher.clone());
            let o = net.forward(g, bind, x, &well, Mode::Train)?;
            (None, Some(head_loss(g, o.global, o.refine, &batch.targets, &batch.visible)?), None)
        }
        Variant::BaselineAll => {
            let x = g.constant(Tensor::cat_batch(&[&batch.student, &batch.teacher])?);
            let conds: Vec<_> = low.iter().chain(&well).copied().collect();
            let o = net.forward(g, bind, x, &conds, Mode::Train)?;
            let targets = Tensor::cat_batch(&[&batch.targets, &batch.targets])?;
            // the weights average over 2n samples; mask one half and rescale
            // so each term is the mean over its own stream
            let none = vec![false; batch.visible.len()];
            let vs: Vec<bool> = batch.visible.iter().chain(&none).copied().collect();
            let vt: Vec<bool> = none.iter().chain(&batch.visible).copied().collect();
            let ls = head_loss(g, o.global, o.refine, &targets, &vs)?;
            let lt = head_loss(g, o.global, o.refine, &targets, &vt)?;
            (Some(g.scale(ls, 2.0)), Some(g.scale(lt, 2.0)), None)
        }
        _ => {
            let xt = g.constant(batch.teacher.clone());
            let ot = net.forward(g, bind, xt, &well, Mode::Train)?;
            let xs = g.constant(batch.student.clone());
            let os = net.forward(g, bind, xs, &low, Mode::Train)?;
            let lt = head_loss(g, ot.global, ot.refine, &batch.targets, &batch.visible)?;
            let ls = head_loss(g, os.global, os.refine, &batch.targets, &batch.visible)?;
            let l = if lupi.layers.is_empty() {
                None
            } else if lupi.weight > 0.0 {
                lupi_node(g, &os.features, &ot.features, lupi)?
            } else {
                // measured for the log only; no gradient path
                let sf: Vec<_> = os.features.iter().map(|&(t, v)| (t, g.detach(v))).collect();
                let tf: Vec<_> = ot.features.iter().map(|&(t, v)| (t, g.detach(v))).collect();
                lupi_node(g, &sf, &tf, lupi)?
            };
            (Some(ls), Some(lt), l)
        }
    };
    let mut total = match (pose_s, pose_t) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("every variant trains at least one stream"),
    };
    if let Some(l) = lupi_var {
        if lupi.weight > 0.0 {
            let w = g.scale(l, lupi.weight);
            total = g.add(total, w)?;
        }
    }
    Ok(StepGraph {
        pose_s,
        pose_t,
        lupi: lupi_var,
        total,
    })
}

/// Result of [`train_run`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub final_metrics: Option<StepMetrics>,
}

/// Trains `cfg.variant` on `data` and writes the checkpoint and the metrics
/// log into `out_dir`.
pub fn train_run(cfg: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = sample_index(data);
    if samples.is_empty() {
        return Err(Error::Contract("training set has no annotated pairs".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);

    let mut net = PoseNet::new(cfg.resolved_model())?;
    let mut opt = Adam::new(&net, cfg.weight_decay);
    let lupi = cfg.resolved_lupi();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = samples.clone();
    let mut step = 0;
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_per_condition) {
            let batch = build_batch(data, chunk, cfg, &mut rng)?;
            let mut g = Graph::new();
            let mut bind = Binding::new(&net, true);
            let sg = build_step(&mut g, &mut bind, &mut net, &batch, cfg.variant, &lupi)?;
            let value = |v: Option<Var>| v.map(|v| g.value(v).item());
            let rec = StepMetrics {
                step,
                epoch,
                pose_loss_s: value(sg.pose_s),
                pose_loss_t: value(sg.pose_t),
                lupi_loss: value(sg.lupi),
                lr,
            };
            let total = g.value(sg.total).item();
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    epoch,
                    detail: format!(
                        "loss is {total} (student {:?}, teacher {:?}, lupi {:?})",
                        rec.pose_loss_s, rec.pose_loss_t, rec.lupi_loss
                    ),
                });
            }
            let grads = g.backward(sg.total)?;
            opt.step(&mut net, &bind, &grads, lr);
            let line = serde_json::to_string(&rec).expect("metrics serialize");
            writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            last = Some(rec);
            step += 1;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let meta = serde_json::json!({
        "variant": cfg.variant,
        "intensity_scaling": cfg.variant.intensity_scaling(),
        "target_mean_intensity": cfg.target_mean_intensity,
        "crop_margin": cfg.crop_margin,
        "train_config": cfg,
        "dataset_hash": data.manifest_hash(),
        "steps": step,
    });
    save_checkpoint(&ckpt, &net, &meta)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics: metrics_path,
        steps: step,
        final_metrics: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, load_dataset, CaptureConfig, Profile, SceneConfig};

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            batch_per_condition: 4,
            epochs: 1,
            variant,
            model: ModelConfig::tiny(),
            ..TrainConfig::default()
        }
    }

    fn tiny_data(dir: &Path) -> Dataset {
        let capture = CaptureConfig {
            exposure_ladder: vec![1.0, 4.0],
            bit_depth: 16,
            ..CaptureConfig::new(Profile::Outdoor)
        };
        generate_dataset(4, &capture, &SceneConfig::default(), Profile::Outdoor, dir, 3).unwrap();
        load_dataset(dir).unwrap()
    }

    #[test]
    fn lr_schedule_halves_every_six_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert_eq!(cfg.lr_at(5), 5e-4);
        assert_eq!(cfg.lr_at(6), 2.5e-4);
        assert_eq!(cfg.lr_at(12), 1.25e-4);
    }

    #[test]
    fn variant_mapping() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let cfg = TrainConfig {
                variant: v,
                ..TrainConfig::default()
            };
            let l = cfg.resolved_lupi();
            match v {
                Variant::BaselineLow | Variant::BaselineWell | Variant::BaselineAll => {
                    assert_eq!(cfg.resolved_model().norm, NormKind::Plain);
                    assert_eq!(l.weight, 0.0);
                }
                Variant::LsbnOnly => {
                    assert_eq!(cfg.resolved_model().norm, NormKind::Lsbn);
                    assert_eq!(l.weight, 0.0);
                }
                Variant::LupiOnly => assert_eq!(cfg.resolved_model().norm, NormKind::Plain),
                Variant::LupiFeat => assert_eq!(l.mode, LupiMode::Feat),
                Variant::NoScaling => assert!(!v.intensity_scaling()),
                Variant::Ours => assert!(l.weight > 0.0),
            }
        }
        assert!("best".parse::<Variant>().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "variant": "lsbn_only"}"#).unwrap();
        assert_eq!((cfg.epochs, cfg.variant, cfg.lr), (3, Variant::LsbnOnly, 5e-4));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_per_condition: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn batch_pairs_share_crops_and_scaling_hits_target() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path());
        let cfg = tiny_cfg(Variant::Ours);
        let samples = sample_index(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch(&data, &samples[..3], &cfg, &mut rng).unwrap();
        assert_eq!(batch.student.shape(), &[3, 3, 32, 24]);
        assert_eq!(batch.targets.shape(), &[3, 14, 8, 6]);
        for i in 0..3 {
            let s = batch.student.sample(i);
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            if s.iter().all(|&v| v < 1.0) {
                assert!((mean - 0.4).abs() < 1e-6, "sample {i} mean {mean}");
            }
            // same crop: bright teacher pixels coincide with non-dark student pixels
            let t = batch.teacher.sample(i);
            let zero_t = t.iter().filter(|&&v| v == 0.0).count();
            let zero_both = t.iter().zip(s).filter(|(a, b)| **a == 0.0 && **b == 0.0).count();
            assert_eq!(zero_t, zero_both);
        }
    }

    #[test]
    fn lupi_gradient_leaves_well_lit_affine_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path());
        let cfg = tiny_cfg(Variant::Ours);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = build_batch(&data, &sample_index(&data)[..4], &cfg, &mut rng).unwrap();
        let mut net = PoseNet::new(cfg.resolved_model()).unwrap();
        let before: Vec<Tensor> = (0..net.num_params()).map(|i| net.param(i).clone()).collect();
        let mut g = Graph::new();
        let mut bind = Binding::new(&net, true);
        let sg = build_step(&mut g, &mut bind, &mut net, &batch, Variant::Ours, &cfg.resolved_lupi()).unwrap();
        let grads = g.backward(sg.lupi.unwrap()).unwrap();
        Adam::new(&net, cfg.weight_decay).step(&mut net, &bind, &grads, 1e-3);
        let mut moved_conv = false;
        for id in 0..net.num_params() {
            let info = net.param_info(id);
            let delta = net.param(id).max_abs_diff(&before[id]);
            if info.condition == Some(LightingCondition::WellLit) {
                assert_eq!(delta, 0.0, "{}", info.name);
            }
            if !info.is_norm && delta > 0.0 {
                moved_conv = true;
            }
        }
        assert!(moved_conv);
    }

    #[test]
    fn lsbn_only_has_no_lupi_gradient() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path());
        let cfg = tiny_cfg(Variant::LsbnOnly);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = build_batch(&data, &sample_index(&data)[..4], &cfg, &mut rng).unwrap();
        let mut net = PoseNet::new(cfg.resolved_model()).unwrap();
        let mut g = Graph::new();
        let mut bind = Binding::new(&net, true);
        let sg = build_step(&mut g, &mut bind, &mut net, &batch, cfg.variant, &cfg.resolved_lupi()).unwrap();
        let lupi = sg.lupi.unwrap();
        assert!(g.value(lupi).item() > 0.0);
        let grads = g.backward(lupi).unwrap();
        assert!((0..net.num_params()).all(|id| bind.var(id).and_then(|v| grads.get(v)).is_none()));

        // mixed batches need shared BN
        let mut g = Graph::new();
        let mut bind = Binding::new(&net, true);
        assert!(build_step(&mut g, &mut bind, &mut net, &batch, Variant::BaselineAll, &cfg.resolved_lupi()).is_err());
        let all = TrainConfig { variant: Variant::BaselineAll, ..cfg };
        let mut plain = PoseNet::new(all.resolved_model()).unwrap();
        let mut g = Graph::new();
        let mut bind = Binding::new(&plain, true);
        let base = build_step(&mut g, &mut bind, &mut plain, &batch, all.variant, &all.resolved_lupi()).unwrap();
        assert!(base.lupi.is_none());
    }

    #[test]
    fn runs_are_reproducible_and_log_every_step() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(&dir.path().join("data"));
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_cfg(Variant::Ours)
        };
        let a = train_run(&cfg, &data, &dir.path().join("a")).unwrap();
        let b = train_run(&cfg, &data, &dir.path().join("b")).unwrap();
        let la = fs::read(&a.metrics).unwrap();
        assert_eq!(la, fs::read(&b.metrics).unwrap());
        assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
        // 4 scenes x 2 exposures = 8 samples, batches of 4, 2 epochs
        assert_eq!(a.steps, 4);
        let lines: Vec<StepMetrics> = String::from_utf8(la)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|r| r.lupi_loss.is_some() && r.pose_loss_t.is_some()));
        for v in [Variant::BaselineLow, Variant::BaselineWell, Variant::BaselineAll, Variant::LupiOnly] {
            let out = train_run(&tiny_cfg(v), &data, &dir.path().join(v.as_str())).unwrap();
            let m = out.final_metrics.unwrap();
            assert_eq!(m.pose_loss_s.is_some(), v.trains_low_light());
            assert_eq!(m.pose_loss_t.is_some(), v.trains_well_lit());
            assert_eq!(m.lupi_loss.is_some(), v == Variant::LupiOnly);
        }
    }
}

//! Style and feature gaps between lighting conditions.
//!
//! Each condition is a set of per-image vectors (flattened Grams or pooled
//! features) and the gap between two sets is their modified Hausdorff
//! distance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{eval_samples, EvalConfig, EvalSample, InputSettings, Split};
use crate::losses::{gram, GramMatrix};
use crate::netcore::{Checkpoint, FeatureMap, LayerTag, LightingCondition, Mode, ModelConfig, PoseNet};
use crate::synthgen::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Upper triangle of the Gram matrix, divided by the spatial size.
    Gram,
    /// Global average pooled features.
    Feature,
    /// Raw flattened feature maps.
    FeatureFlat,
}

/// Vectors of one lighting condition at one layer, one per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub condition: LightingCondition,
    pub layer: LayerTag,
    pub vectors: Vec<Vec<f64>>,
}

/// How the two directed mean distances are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffAggregation {
    #[default]
    Max,
    Mean,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn directed(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|x| b.iter().map(|y| euclid(x, y)).fold(f64::INFINITY, f64::min))
        .sum();
    total / a.len() as f64
}

/// Modified Hausdorff distance: the larger (or mean, with
/// [`HausdorffAggregation::Mean`]) of the two directed average
/// nearest-neighbour distances.
pub fn avg_hausdorff(a: &[Vec<f64>], b: &[Vec<f64>], agg: HausdorffAggregation) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("Hausdorff distance of an empty set".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Shape("Hausdorff distance needs vectors of one dimensionality".into()));
    }
    let (ab, ba) = (directed(a, b), directed(b, a));
    Ok(match agg {
        HausdorffAggregation::Max => ab.max(ba),
        HausdorffAggregation::Mean => (ab + ba) / 2.0,
    })
}

/// Elementwise mean squared difference of two Gram matrices.
pub fn gram_mse(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    if a.channels != b.channels {
        return Err(Error::Shape(format!("{} vs {} channel Grams", a.channels, b.channels)));
    }
    let d: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(d / a.data.len() as f64)
}

/// Rebuilds the symmetric matrix from an upper triangle.
pub fn unflatten_upper(v: &[f64], channels: usize) -> Result<Vec<f64>> {
    if v.len() != channels * (channels + 1) / 2 {
        return Err(Error::Shape(format!(
            "{} values do not form the upper triangle of a {channels} x {channels} matrix",
            v.len()
        )));
    }
    let mut out = vec![0.0; channels * channels];
    let mut it = v.iter();
    for i in 0..channels {
        for j in i..channels {
            let x = *it.next().expect("length checked");
            out[i * channels + j] = x;
            out[j * channels + i] = x;
        }
    }
    Ok(out)
}

/// Per-layer features of both conditions for every annotated instance.
///
/// Low-light samples are paired with the well-lit sample of their scene and
/// instance through `partner`.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub low: BTreeMap<LayerTag, Vec<FeatureMap>>,
    pub well: BTreeMap<LayerTag, Vec<FeatureMap>>,
    /// For each low-light sample, the index of its well-lit counterpart.
    pub partner: Vec<usize>,
}

fn run_features(net: &mut PoseNet, samples: &[&EvalSample], layers: &[LayerTag], batch: usize) -> Result<BTreeMap<LayerTag, Vec<FeatureMap>>> {
    let mut out: BTreeMap<LayerTag, Vec<FeatureMap>> = layers.iter().map(|&l| (l, Vec::new())).collect();
    for chunk in samples.chunks(batch.max(1)) {
        let cond = chunk[0].condition;
        let tensors: Vec<Tensor> = chunk.iter().map(|s| s.input.to_tensor()).collect();
        let x = Tensor::cat_batch(&tensors.iter().collect::<Vec<_>>())?;
        let pred = net.predict(&x, cond, Mode::Eval)?;
        for f in pred.features {
            if let Some(list) = out.get_mut(&f.layer) {
                for i in 0..chunk.len() {
                    let (_, c, h, w) = f.tensor.dims4()?;
                    let t = Tensor::from_vec(&[1, c, h, w], f.tensor.sample(i).to_vec())?;
                    list.push(FeatureMap::new(t, f.layer, cond)?);
                }
            }
        }
    }
    Ok(out)
}

/// Runs the student path on every low-light crop and the teacher path on
/// every well-lit crop, in a fixed order.
pub fn extract_features(ck: &mut Checkpoint, data: &Dataset, layers: &[LayerTag]) -> Result<Extraction> {
    if layers.is_empty() {
        return Err(Error::Config("no layers selected".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("cannot extract features from an empty dataset".into()));
    }
    let settings = InputSettings::from_checkpoint(ck)?;
    let cfg = EvalConfig::default();
    let samples = eval_samples(data, &settings, &cfg)?;
    let low: Vec<&EvalSample> = samples.iter().filter(|s| s.split != Split::Wl).collect();
    let well: Vec<&EvalSample> = samples.iter().filter(|s| s.split == Split::Wl).collect();
    let index: BTreeMap<(&str, u64), usize> = well
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.annotation.scene_id.as_str(), s.annotation.instance_id), i))
        .collect();
    let partner = low
        .iter()
        .map(|s| {
            index
                .get(&(s.annotation.scene_id.as_str(), s.annotation.instance_id))
                .copied()
                .ok_or_else(|| Error::Contract(format!("{} has no well-lit partner", s.image)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Extraction {
        low: run_features(&mut ck.net, &low, layers, cfg.batch_size)?,
        well: run_features(&mut ck.net, &well, layers, cfg.batch_size)?,
        partner,
    })
}

/// One vector per feature map.
pub fn vectorize(maps: &[FeatureMap], what: Representation) -> Result<Vec<Vec<f64>>> {
    maps.iter()
        .map(|m| {
            let (_, c, h, w) = m.tensor.dims4()?;
            let hw = (h * w) as f64;
            Ok(match what {
                Representation::Gram => {
                    let g = gram(m)?.remove(0);
                    g.upper_triangle().into_iter().map(|v| v / hw).collect()
                }
                Representation::Feature => (0..c)
                    .map(|ch| m.tensor.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw)
                    .collect(),
                Representation::FeatureFlat => m.tensor.data().to_vec(),
            })
        })
        .collect()
}

/// Condition sets for every extracted layer.
pub fn extract(ck: &mut Checkpoint, data: &Dataset, what: Representation, layers: &[LayerTag]) -> Result<Vec<ConditionSet>> {
    let ex = extract_features(ck, data, layers)?;
    let mut out = Vec::with_capacity(2 * layers.len());
    for &layer in layers {
        for (condition, maps) in [(LightingCondition::LowLight, &ex.low), (LightingCondition::WellLit, &ex.well)] {
            out.push(ConditionSet {
                condition,
                layer,
                vectors: vectorize(&maps[&layer], what)?,
            });
        }
    }
    Ok(out)
}

/// Mean over low-light samples of the Gram MSE against their well-lit
/// partner (Grams divided by the spatial size).
pub fn paired_style_mse(ex: &Extraction, layer: LayerTag) -> Result<f64> {
    let (low, well) = match (ex.low.get(&layer), ex.well.get(&layer)) {
        (Some(l), Some(w)) => (l, w),
        _ => return Err(Error::Contract(format!("layer {layer} was not extracted"))),
    };
    if low.is_empty() {
        return Err(Error::Contract("no pairs to compare".into()));
    }
    let mut total = 0.0;
    for (m, &p) in low.iter().zip(&ex.partner) {
        let mut a = gram(m)?.remove(0);
        let mut b = gram(&well[p])?.remove(0);
        for g in [&mut a, &mut b] {
            let hw = g.spatial as f64;
            g.data.iter_mut().for_each(|v| *v /= hw);
        }
        total += gram_mse(&a, &b)?;
    }
    Ok(total / low.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub checkpoint: String,
    pub layer: LayerTag,
    pub style_gap: f64,
    pub feature_gap: f64,
    pub paired_style_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub aggregation: HausdorffAggregation,
    pub feature_representation: Representation,
    pub rows: Vec<GapRow>,
}

impl GapReport {
    pub fn row(&self, checkpoint: &str, layer: LayerTag) -> Option<&GapRow> {
        self.rows.iter().find(|r| r.checkpoint == checkpoint && r.layer == layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub layers: Vec<LayerTag>,
    pub aggregation: HausdorffAggregation,
    /// `feature` (pooled) or `feature_flat`.
    pub feature_representation: Representation,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig {
            layers: vec![LayerTag::R1, LayerTag::R2, LayerTag::R3, LayerTag::R4],
            aggregation: HausdorffAggregation::Max,
            feature_representation: Representation::Feature,
        }
    }
}

/// Architecture fields that must agree for gaps to be comparable; the norm
/// kind and seed may differ between variants.
fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |m: &ModelConfig| ModelConfig {
        norm: crate::netcore::NormKind::Plain,
        seed: 0,
        ..m.clone()
    };
    strip(a) == strip(b)
}

/// Style and feature gaps for each named checkpoint and layer.
pub fn gap_report(checkpoints: &mut [(String, Checkpoint)], data: &Dataset, cfg: &GapConfig) -> Result<GapReport> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints given".into()));
    }
    if cfg.feature_representation == Representation::Gram {
        return Err(Error::Config("feature_representation must be feature or feature_flat".into()));
    }
    let first = checkpoints[0].1.net.config().clone();
    for (name, ck) in checkpoints.iter() {
        if !same_architecture(&first, ck.net.config()) {
            return Err(Error::Contract(format!(
                "checkpoint `{name}` has a different architecture from `{}`",
                checkpoints[0].0
            )));
        }
    }
    let mut rows = Vec::new();
    for (name, ck) in checkpoints.iter_mut() {
        let ex = extract_features(ck, data, &cfg.layers)?;
        for &layer in &cfg.layers {
            let gap = |what| -> Result<f64> {
                let a = vectorize(&ex.low[&layer], what)?;
                let b = vectorize(&ex.well[&layer], what)?;
                avg_hausdorff(&a, &b, cfg.aggregation)
            };
            rows.push(GapRow {
                checkpoint: name.clone(),
                layer,
                style_gap: gap(Representation::Gram)?,
                feature_gap: gap(cfg.feature_representation)?,
                paired_style_mse: paired_style_mse(&ex, layer)?,
            });
        }
    }
    Ok(GapReport {
        aggregation: cfg.aggregation,
        feature_representation: cfg.feature_representation,
        rows,
    })
}

/// Writes `gap_report.json` and one CSV per quantity (rows: layers,
/// columns: checkpoints).
pub fn write_gap_report(report: &GapReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = out_dir.join("gap_report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let mut names: Vec<&str> = Vec::new();
    let mut layers: Vec<LayerTag> = Vec::new();
    for r in &report.rows {
        if !names.contains(&r.checkpoint.as_str()) {
            names.push(&r.checkpoint);
        }
        if !layers.contains(&r.layer) {
            layers.push(r.layer);
        }
    }
    let quantities: [(&str, fn(&GapRow) -> f64); 3] = [
        ("style_gap", |r| r.style_gap),
        ("feature_gap", |r| r.feature_gap),
        ("paired_style_mse", |r| r.paired_style_mse),
    ];
    for (q, get) in quantities {
        let mut csv = format!("layer,{}\n", names.join(","));
        for &l in &layers {
            csv.push_str(l.as_str());
            for n in &names {
                let v = report.row(n, l).map(get).unwrap_or(f64::NAN);
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        let path = out_dir.join(format!("{q}.csv"));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let mut ab = 0.0;
        for x in a {
            let mut m = f64::INFINITY;
            for y in b {
                let mut s = 0.0;
                for k in 0..x.len() {
                    s += (x[k] - y[k]) * (x[k] - y[k]);
                }
                m = m.min(s.sqrt());
            }
            ab += m;
        }
        let mut ba = 0.0;
        for y in b {
            let mut m = f64::INFINITY;
            for x in a {
                let mut s = 0.0;
                for k in 0..x.len() {
                    s += (x[k] - y[k]) * (x[k] - y[k]);
                }
                m = m.min(s.sqrt());
            }
            ba += m;
        }
        (ab / a.len() as f64).max(ba / b.len() as f64)
    }

    #[test]
    fn hausdorff_examples() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![3.0, 4.0]];
        assert_eq!(avg_hausdorff(&a, &b, HausdorffAggregation::Max).unwrap(), 5.0);
        assert_eq!(avg_hausdorff(&a, &a, HausdorffAggregation::Max).unwrap(), 0.0);
        assert!(avg_hausdorff(&a, &[], HausdorffAggregation::Max).is_err());
        assert!(avg_hausdorff(&a, &[vec![1.0]], HausdorffAggregation::Max).is_err());
        // {0} vs {0, 10}: directed terms 0 and 5
        let c = vec![vec![0.0], vec![10.0]];
        let z = vec![vec![0.0]];
        assert_eq!(avg_hausdorff(&z, &c, HausdorffAggregation::Max).unwrap(), 5.0);
        assert_eq!(avg_hausdorff(&z, &c, HausdorffAggregation::Mean).unwrap(), 2.5);
    }

    #[test]
    fn gram_mse_example() {
        let g = |v: f64| GramMatrix {
            data: vec![v],
            layer: LayerTag::R1,
            channels: 1,
            spatial: 1,
        };
        assert_eq!(gram_mse(&g(1.0), &g(3.0)).unwrap(), 4.0);
        assert_eq!(gram_mse(&g(2.0), &g(2.0)).unwrap(), 0.0);
    }

    #[test]
    fn vector_lengths() {
        let t = Tensor::from_vec(&[1, 5, 2, 3], (0..30).map(|v| v as f64).collect()).unwrap();
        let m = FeatureMap::new(t, LayerTag::R1, LightingCondition::LowLight).unwrap();
        assert_eq!(vectorize(std::slice::from_ref(&m), Representation::Gram).unwrap()[0].len(), 15);
        let pooled = vectorize(std::slice::from_ref(&m), Representation::Feature).unwrap();
        assert_eq!(pooled[0], vec![2.5, 8.5, 14.5, 20.5, 26.5]);
        assert_eq!(vectorize(&[m], Representation::FeatureFlat).unwrap()[0].len(), 30);
    }

    fn sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..5).prop_flat_map(|d| {
            let v = proptest::collection::vec(-10.0f64..10.0, d);
            (
                proptest::collection::vec(v.clone(), 1..=20),
                proptest::collection::vec(v, 1..=20),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_metric_axioms((a, b) in sets()) {
            let d = avg_hausdorff(&a, &b, HausdorffAggregation::Max).unwrap();
            prop_assert_eq!(d, brute(&a, &b));
            prop_assert_eq!(d, avg_hausdorff(&b, &a, HausdorffAggregation::Max).unwrap());
            prop_assert!(d >= 0.0);
            prop_assert_eq!(avg_hausdorff(&a, &a, HausdorffAggregation::Max).unwrap(), 0.0);
        }

        #[test]
        fn upper_triangle_is_lossless(c in 1usize..7, vals in proptest::collection::vec(-5.0f64..5.0, 49)) {
            let mut data = vec![0.0; c * c];
            for i in 0..c {
                for j in i..c {
                    data[i * c + j] = vals[i * 7 + j];
                    data[j * c + i] = vals[i * 7 + j];
                }
            }
            let g = GramMatrix { data: data.clone(), layer: LayerTag::R2, channels: c, spatial: 1 };
            prop_assert_eq!(unflatten_upper(&g.upper_triangle(), c).unwrap(), data);
        }
    }
}

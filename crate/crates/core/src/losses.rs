//! Heatmap regression loss and the Gram-matrix privileged-information loss.
//!
//! Every loss comes in two flavours: a plain function over tensors, used for
//! evaluation and as a reference, and a graph builder used during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gemm, Graph, Var};
use crate::netcore::{FeatureMap, LayerTag, LightingCondition};
use crate::tensor::Tensor;

/// Which side of the teacher/student pair receives the LUPI gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Direction {
    /// Only the student (low-light path) is pulled towards the teacher.
    #[default]
    #[serde(rename = "t2s", alias = "T->S")]
    TeacherToStudent,
    #[serde(rename = "both", alias = "T<->S")]
    Both,
    /// Only the teacher moves.
    #[serde(rename = "s2t", alias = "T<-S")]
    StudentToTeacher,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2s" | "T->S" => Ok(Direction::TeacherToStudent),
            "both" | "T<->S" => Ok(Direction::Both),
            "s2t" | "T<-S" => Ok(Direction::StudentToTeacher),
            other => Err(Error::Config(format!(
                "unknown gradient direction `{other}` (expected t2s, both or s2t)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LupiMode {
    /// Match channel correlations (style).
    #[default]
    Gram,
    /// Match the activations themselves.
    Feat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LupiConfig {
    pub layers: Vec<LayerTag>,
    pub weight: f64,
    pub direction: Direction,
    pub mode: LupiMode,
}

impl Default for LupiConfig {
    fn default() -> Self {
        LupiConfig {
            layers: LayerTag::ALL.to_vec(),
            weight: 1e-3,
            direction: Direction::TeacherToStudent,
            mode: LupiMode::Gram,
        }
    }
}

impl LupiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::Config(format!(
                "LUPI weight must be finite and non-negative, got {}",
                self.weight
            )));
        }
        if self.weight > 0.0 && self.layers.is_empty() {
            return Err(Error::Config(
                "LUPI needs at least one layer when its weight is positive".into(),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].contains(l) {
                return Err(Error::Config(format!("LUPI layer {l} listed twice")));
            }
        }
        Ok(())
    }
}

/// Channel inner-product matrix of one sample's feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    /// Row-major `channels x channels`.
    pub data: Vec<f64>,
    pub layer: LayerTag,
    pub channels: usize,
    /// `H * W` of the source feature map.
    pub spatial: usize,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.channels + j]
    }

    /// Upper triangle (diagonal included), row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let c = self.channels;
        let mut out = Vec::with_capacity(c * (c + 1) / 2);
        for i in 0..c {
            for j in i..c {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

fn heatmap_dims(p: &Tensor, y: &Tensor) -> Result<(usize, usize, usize)> {
    if p.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "heatmaps {:?} vs targets {:?}",
            p.shape(),
            y.shape()
        )));
    }
    match *p.shape() {
        [k, h, w] => Ok((1, k, h * w)),
        [n, k, h, w] => Ok((n, k, h * w)),
        ref s => Err(Error::Shape(format!(
            "heatmaps must be K x h x w or N x K x h x w, got {s:?}"
        ))),
    }
}

/// Mean over joints of the per-joint squared L2 distance. A leading batch
/// axis is averaged out.
pub fn pose_loss(p: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, k, _) = heatmap_dims(p, y)?;
    if k == 0 || n == 0 {
        return Err(Error::Shape("heatmaps have no joints".into()));
    }
    let s: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / (k * n) as f64)
}

/// Per-(sample, joint) weights so that each sample's loss averages only over
/// its visible joints and the batch is averaged. Samples with no visible joint
/// contribute nothing.
pub fn visibility_weights(visible: &[bool], n: usize, k: usize) -> Result<Vec<f64>> {
    if visible.len() != n * k {
        return Err(Error::Shape(format!(
            "visibility mask has {} entries, expected {}",
            visible.len(),
            n * k
        )));
    }
    let mut w = vec![0.0; n * k];
    for s in 0..n {
        let row = &visible[s * k..(s + 1) * k];
        let count = row.iter().filter(|&&v| v).count();
        if count > 0 {
            for j in 0..k {
                if row[j] {
                    w[s * k + j] = 1.0 / (count * n) as f64;
                }
            }
        }
    }
    Ok(w)
}

/// Pose loss restricted to annotated joints (`visible` is `N * K`, row-major).
pub fn masked_pose_loss(p: &Tensor, y: &Tensor, visible: &[bool]) -> Result<f64> {
    let (n, k, hw) = heatmap_dims(p, y)?;
    let w = visibility_weights(visible, n, k)?;
    let mut total = 0.0;
    for (g, wg) in w.iter().enumerate() {
        if *wg == 0.0 {
            continue;
        }
        let r = g * hw..(g + 1) * hw;
        let s: f64 = p.data()[r.clone()]
            .iter()
            .zip(&y.data()[r])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += wg * s;
    }
    Ok(total)
}

/// One Gram matrix per sample of the batch.
pub fn gram(f: &FeatureMap) -> Result<Vec<GramMatrix>> {
    let (n, c, h, w) = f.tensor.dims4()?;
    let hw = h * w;
    let data = f.tensor.data();
    Ok((0..n)
        .map(|s| {
            let x = &data[s * c * hw..(s + 1) * c * hw];
            let mut g = vec![0.0; c * c];
            gemm(c, hw, c, x, false, x, true, &mut g, 0.0);
            // the product is symmetric up to rounding; make it exact
            for i in 0..c {
                for j in 0..i {
                    g[i * c + j] = g[j * c + i];
                }
            }
            GramMatrix {
                data: g,
                layer: f.layer,
                channels: c,
                spatial: hw,
            }
        })
        .collect())
}

/// Pairs up the student and teacher maps of every configured layer.
fn select_pairs<'a>(
    student: &'a [FeatureMap],
    teacher: &'a [FeatureMap],
    cfg: &LupiConfig,
) -> Result<Vec<(&'a FeatureMap, &'a FeatureMap)>> {
    let find = |maps: &'a [FeatureMap], side: &str, tag: LayerTag| {
        let mut it = maps.iter().filter(|m| m.layer == tag);
        match (it.next(), it.next()) {
            (Some(m), None) => Ok(m),
            (None, _) => Err(Error::Contract(format!("{side} features lack layer {tag}"))),
            (Some(_), Some(_)) => Err(Error::Contract(format!(
                "{side} features contain layer {tag} twice"
            ))),
        }
    };
    let mut out = Vec::with_capacity(cfg.layers.len());
    for &tag in &cfg.layers {
        let s = find(student, "student", tag)?;
        let t = find(teacher, "teacher", tag)?;
        if s.condition != LightingCondition::LowLight || t.condition != LightingCondition::WellLit {
            return Err(Error::Contract(format!(
                "layer {tag}: student must be low-light and teacher well-lit"
            )));
        }
        if s.tensor.shape() != t.tensor.shape() {
            return Err(Error::Contract(format!(
                "layer {tag}: student {:?} and teacher {:?} are not paired",
                s.tensor.shape(),
                t.tensor.shape()
            )));
        }
        out.push((s, t));
    }
    Ok(out)
}

/// Normalizer of the Gram discrepancy for a `C x N` feature map.
fn gram_prefactor(c: usize, spatial: usize) -> f64 {
    let (c, n) = (c as f64, spatial as f64);
    1.0 / (4.0 * c * c * n * n)
}

/// Style discrepancy between paired student (low-light) and teacher
/// (well-lit) features, averaged over the batch. Unweighted: multiply by
/// `cfg.weight` or use [`total_loss`].
pub fn lupi_loss(student: &[FeatureMap], teacher: &[FeatureMap], cfg: &LupiConfig) -> Result<f64> {
    let pairs = select_pairs(student, teacher, cfg)?;
    let mut total = 0.0;
    for (s, t) in pairs {
        let (n, c, h, w) = s.tensor.dims4()?;
        match cfg.mode {
            LupiMode::Gram => {
                let k = gram_prefactor(c, h * w);
                for (gs, gt) in gram(s)?.iter().zip(&gram(t)?) {
                    let d: f64 = gs
                        .data
                        .iter()
                        .zip(&gt.data)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    total += k * d / n as f64;
                }
            }
            LupiMode::Feat => {
                let d: f64 = s
                    .tensor
                    .data()
                    .iter()
                    .zip(t.tensor.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                total += d / s.tensor.len() as f64;
            }
        }
    }
    Ok(total)
}

/// Student plus teacher pose losses plus the weighted LUPI term.
pub fn total_loss(student_pose: f64, teacher_pose: f64, lupi: f64, cfg: &LupiConfig) -> Result<f64> {
    if !(student_pose.is_finite() && teacher_pose.is_finite() && lupi.is_finite()) {
        return Err(Error::Degenerate(format!(
            "non-finite loss term: student {student_pose}, teacher {teacher_pose}, lupi {lupi}"
        )));
    }
    Ok(student_pose + teacher_pose + cfg.weight * lupi)
}

/// Graph node for [`masked_pose_loss`].
pub fn pose_loss_node(g: &mut Graph, pred: Var, target: &Tensor, visible: &[bool]) -> Result<Var> {
    let (n, k, hw) = heatmap_dims(g.value(pred), target)?;
    let w = visibility_weights(visible, n, k)?;
    let y = g.constant(target.clone());
    g.weighted_sq_diff(pred, y, hw, w)
}

/// Graph node for the unweighted [`lupi_loss`]. `student` and `teacher` list
/// the feature variables of each layer; gradients are cut according to
/// `cfg.direction`. Returns `None` when no layer is selected.
pub fn lupi_node(
    g: &mut Graph,
    student: &[(LayerTag, Var)],
    teacher: &[(LayerTag, Var)],
    cfg: &LupiConfig,
) -> Result<Option<Var>> {
    let lookup = |side: &[(LayerTag, Var)], name: &str, tag: LayerTag| {
        side.iter()
            .find(|(t, _)| *t == tag)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Contract(format!("{name} features lack layer {tag}")))
    };
    let mut total: Option<Var> = None;
    for &tag in &cfg.layers {
        let s = lookup(student, "student", tag)?;
        let t = lookup(teacher, "teacher", tag)?;
        if g.value(s).shape() != g.value(t).shape() {
            return Err(Error::Contract(format!(
                "layer {tag}: student {:?} and teacher {:?} are not paired",
                g.value(s).shape(),
                g.value(t).shape()
            )));
        }
        let (n, c, h, w) = g.value(s).dims4()?;
        let (a, b, group, weight) = match cfg.mode {
            LupiMode::Gram => (
                g.gram(s)?,
                g.gram(t)?,
                c * c,
                gram_prefactor(c, h * w) / n as f64,
            ),
            LupiMode::Feat => (s, t, c * h * w, 1.0 / (n * c * h * w) as f64),
        };
        let (a, b) = match cfg.direction {
            Direction::TeacherToStudent => (a, g.detach(b)),
            Direction::StudentToTeacher => (g.detach(a), b),
            Direction::Both => (a, b),
        };
        let term = g.weighted_sq_diff(a, b, group, vec![weight; n])?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}

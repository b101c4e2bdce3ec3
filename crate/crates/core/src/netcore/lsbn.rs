//! Lighting-condition specific batch normalization.
//!
//! One whitening path, two condition-selected affine pairs and two banks of
//! running statistics. For a channel `x` of a single-condition batch,
//!
//! ```text
//! LSBN(x, λ) = λ (γ_low  · x̂ + β_low)
//!            + (1 - λ) (γ_well · x̂ + β_well),      x̂ = (x - μ) / sqrt(σ² + ε)
//! ```
//!
//! where `μ, σ²` are the batch moments in training mode and the selected
//! condition's running moments in evaluation mode. With `λ ∈ {0, 1}` the
//! blend reduces to picking one affine pair, which is how it is evaluated.

use serde::{Deserialize, Serialize};

use super::model::Mode;
use super::LightingCondition;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormStats, ObservedStats, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Affine {
    pub fn identity(channels: usize) -> Self {
        Affine {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::Shape("gamma and beta lengths differ".into()));
        }
        let c = gamma.len();
        Ok(Affine {
            gamma: Tensor::from_vec(&[c], gamma)?,
            beta: Tensor::from_vec(&[c], beta)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update; the variance entering the average
    /// is the unbiased batch estimate.
    pub fn update(&mut self, observed: &ObservedStats, momentum: f64) {
        let correction = observed.count as f64 / (observed.count as f64 - 1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * observed.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * observed.var[c] * correction;
        }
    }
}

/// Per-channel moments of the current mini-batch (never mixing conditions).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsbnParams {
    pub low: Affine,
    pub well: Affine,
    pub running_low: RunningStats,
    pub running_well: RunningStats,
    pub eps: f64,
    pub momentum: f64,
}

impl LsbnParams {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        LsbnParams {
            low: Affine::identity(channels),
            well: Affine::identity(channels),
            running_low: RunningStats::new(channels),
            running_well: RunningStats::new(channels),
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.low.gamma.len()
    }

    pub fn affine(&self, cond: LightingCondition) -> &Affine {
        match cond {
            LightingCondition::LowLight => &self.low,
            LightingCondition::WellLit => &self.well,
        }
    }

    pub fn running(&self, cond: LightingCondition) -> &RunningStats {
        match cond {
            LightingCondition::LowLight => &self.running_low,
            LightingCondition::WellLit => &self.running_well,
        }
    }

    fn running_mut(&mut self, cond: LightingCondition) -> &mut RunningStats {
        match cond {
            LightingCondition::LowLight => &mut self.running_low,
            LightingCondition::WellLit => &mut self.running_well,
        }
    }
}

/// Ordinary batch normalization, used by the single-BN baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub affine: Affine,
    pub running: RunningStats,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NormLayer {
    Lsbn(LsbnParams),
    Plain(BnParams),
}

impl NormLayer {
    pub fn channels(&self) -> usize {
        match self {
            NormLayer::Lsbn(p) => p.channels(),
            NormLayer::Plain(p) => p.affine.gamma.len(),
        }
    }

    /// Number of affine parameter sets (2 for LSBN, 1 for plain BN).
    pub fn affine_sets(&self) -> usize {
        match self {
            NormLayer::Lsbn(_) => 2,
            NormLayer::Plain(_) => 1,
        }
    }

    /// Index of the affine set serving `cond`: 0 = low-light, 1 = well-lit for
    /// LSBN, always 0 for plain BN.
    pub fn affine_index(&self, cond: LightingCondition) -> usize {
        match (self, cond) {
            (NormLayer::Lsbn(_), LightingCondition::WellLit) => 1,
            _ => 0,
        }
    }

    pub fn affine_at(&self, idx: usize) -> &Affine {
        match self {
            NormLayer::Lsbn(p) if idx == 0 => &p.low,
            NormLayer::Lsbn(p) => &p.well,
            NormLayer::Plain(p) => &p.affine,
        }
    }

    pub fn affine_at_mut(&mut self, idx: usize) -> &mut Affine {
        match self {
            NormLayer::Lsbn(p) => {
                if idx == 0 {
                    &mut p.low
                } else {
                    &mut p.well
                }
            }
            NormLayer::Plain(p) => &mut p.affine,
        }
    }

    /// Running statistics as `(tag, stats)` pairs, for checkpointing.
    pub fn running_banks(&self) -> Vec<(&'static str, &RunningStats)> {
        match self {
            NormLayer::Lsbn(p) => vec![("low", &p.running_low), ("well", &p.running_well)],
            NormLayer::Plain(p) => vec![("shared", &p.running)],
        }
    }

    pub fn running_banks_mut(&mut self) -> Vec<(&'static str, &mut RunningStats)> {
        match self {
            NormLayer::Lsbn(p) => vec![
                ("low", &mut p.running_low),
                ("well", &mut p.running_well),
            ],
            NormLayer::Plain(p) => vec![("shared", &mut p.running)],
        }
    }

    /// The single condition carried by `conds`. LSBN refuses batches that mix
    /// conditions; plain BN accepts them (and ignores the condition).
    pub fn batch_condition(&self, conds: &[LightingCondition]) -> Result<LightingCondition> {
        let first = *conds
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        if matches!(self, NormLayer::Lsbn(_)) && conds.iter().any(|&c| c != first) {
            return Err(Error::Contract(
                "a single LSBN call received a batch with mixed lighting conditions; split the batch by condition".into(),
            ));
        }
        Ok(first)
    }

    /// Appends the normalization to `g`. `gamma`/`beta` must be the vars bound
    /// to `affine_index(cond)`. In training mode the batch statistics are used
    /// and folded into the running statistics of `cond` only.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: Var,
        gamma: Var,
        beta: Var,
        conds: &[LightingCondition],
        mode: Mode,
    ) -> Result<Var> {
        let cond = self.batch_condition(conds)?;
        let (eps, momentum) = match self {
            NormLayer::Lsbn(p) => (p.eps, p.momentum),
            NormLayer::Plain(p) => (p.eps, p.momentum),
        };
        let stats = match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => {
                let r = match self {
                    NormLayer::Lsbn(p) => p.running(cond),
                    NormLayer::Plain(p) => &p.running,
                };
                NormStats::Fixed {
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                }
            }
        };
        let y = g.norm(x, gamma, beta, &stats, eps)?;
        if mode == Mode::Train {
            let observed = g
                .observed_stats(y)
                .expect("batch-mode norm node records statistics");
            match self {
                NormLayer::Lsbn(p) => p.running_mut(cond).update(&observed, momentum),
                NormLayer::Plain(p) => p.running.update(&observed, momentum),
            }
        }
        Ok(y)
    }
}

/// Applies one LSBN layer to an `N x C x H x W` batch whose samples all carry
/// the lighting condition listed in `conds` (one entry per sample).
///
/// Returns the normalized activations together with the statistics used for
/// whitening (batch moments in training mode, running moments otherwise).
pub fn lsbn_forward(
    x: &Tensor,
    conds: &[LightingCondition],
    params: &mut LsbnParams,
    mode: Mode,
) -> Result<(Tensor, BatchStats)> {
    let (n, c, _, _) = x.dims4()?;
    if conds.len() != n {
        return Err(Error::Shape(format!(
            "{} condition labels for a batch of {n}",
            conds.len()
        )));
    }
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "input has {c} channels, LSBN layer has {}",
            params.channels()
        )));
    }
    if !x.is_finite() {
        return Err(Error::Degenerate("LSBN input contains non-finite values".into()));
    }
    let mut layer = NormLayer::Lsbn(params.clone());
    let cond = layer.batch_condition(conds)?;
    let affine = params.affine(cond).clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(affine.gamma);
    let bv = g.constant(affine.beta);
    let y = layer.forward(&mut g, xv, gv, bv, conds, mode)?;
    let stats = match mode {
        Mode::Train => {
            let o = g.observed_stats(y).expect("train mode records statistics");
            BatchStats {
                mean: o.mean,
                var: o.var,
            }
        }
        Mode::Eval => {
            let r = params.running(cond);
            BatchStats {
                mean: r.mean.clone(),
                var: r.var.clone(),
            }
        }
    };
    let out = g.value(y).clone();
    if let NormLayer::Lsbn(updated) = layer {
        *params = updated;
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use LightingCondition::*;

    fn white_channel() -> Tensor {
        // mean 0, biased variance 1
        Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap()
    }

    #[test]
    fn already_white_data_is_scaled_by_eps_only() {
        let mut p = LsbnParams::new(1, 1e-5, 0.1);
        let x = white_channel();
        let (y, _) = lsbn_forward(&x, &[WellLit; 2], &mut p, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn low_light_uses_low_affine_pair() {
        let mut p = LsbnParams::new(1, 1e-5, 0.1);
        p.low = Affine::new(vec![2.0], vec![1.0]).unwrap();
        p.well = Affine::new(vec![5.0], vec![5.0]).unwrap();
        let x = white_channel();
        let (y, _) = lsbn_forward(&x, &[LowLight; 2], &mut p, Mode::Train).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (2.0 * b * s + 1.0)).abs() < 1e-12);
        }
        assert_eq!(p.well, Affine::new(vec![5.0], vec![5.0]).unwrap());
    }

    #[test]
    fn mixed_conditions_are_a_contract_violation() {
        let mut p = LsbnParams::new(1, 1e-5, 0.1);
        let err = lsbn_forward(&white_channel(), &[LowLight, WellLit], &mut p, Mode::Train);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn training_updates_only_the_selected_running_bank() {
        let mut p = LsbnParams::new(1, 1e-5, 0.1);
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![3.0, 1.0, 2.0, 2.0]).unwrap();
        lsbn_forward(&x, &[LowLight; 2], &mut p, Mode::Train).unwrap();
        assert_eq!(p.running_well, RunningStats::new(1));
        // batch mean 2, biased var 0.5, unbiased 2/3
        assert!((p.running_low.mean[0] - 0.2).abs() < 1e-15);
        assert!((p.running_low.var[0] - (0.9 + 0.1 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_whitens_with_running_stats() {
        let mut p = LsbnParams::new(1, 0.0 + 1e-5, 0.1);
        p.running_well = RunningStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let (y, stats) = lsbn_forward(&x, &[WellLit], &mut p, Mode::Eval).unwrap();
        assert!((y.item() - 4.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert_eq!(stats.mean, vec![1.0]);
    }
}

use crate::graph::Gradients;
use crate::netcore::{Binding, PoseNet};
use crate::tensor::Tensor;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(net: &PoseNet, weight_decay: f64) -> Self {
        let n = net.num_params();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![None; n],
            v: vec![None; n],
            steps: vec![0; n],
        }
    }

    /// Updates every parameter that received a gradient. Parameters without
    /// one (not bound, or cut off by a detach) keep their value and moments.
    /// Returns the number of updated tensors.
    pub fn step(&mut self, net: &mut PoseNet, bind: &Binding, grads: &Gradients, lr: f64) -> usize {
        let mut updated = 0;
        for id in 0..net.num_params() {
            let Some(grad) = bind.var(id).and_then(|v| grads.get(v)) else {
                continue;
            };
            let p = net.param_mut(id);
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(p.shape()));
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let g = grad.data()[i] + self.weight_decay * pd[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
            updated += 1;
        }
        updated
    }
}

//! Momentum SGD with per-component learning-rate scaling and freezing.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::DetectorParams;

/// Detector components as the transfer procedure sees them. The classifier
/// and regressor always move together as the base learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    Proposal,
    RoiHead,
    BaseLearner,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Backbone,
        Component::Proposal,
        Component::RoiHead,
        Component::BaseLearner,
    ];
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Component::Backbone => "backbone",
            Component::Proposal => "proposal",
            Component::RoiHead => "roi_head",
            Component::BaseLearner => "base_learner",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Component {
    type Err = crate::error::CoreError;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "backbone" => Ok(Component::Backbone),
            "proposal" | "rpn" => Ok(Component::Proposal),
            "roi_head" => Ok(Component::RoiHead),
            "base_learner" => Ok(Component::BaseLearner),
            other => Err(crate::error::CoreError::Config(format!(
                "unknown component {other:?}"
            ))),
        }
    }
}

/// Gradient (or momentum) storage mirroring the parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub backbone: Vec<(Array2<f64>, Array1<f64>)>,
    pub proposal: (Array2<f64>, Array1<f64>),
    pub roi_head: Vec<(Array2<f64>, Array1<f64>)>,
    pub classifier: (Array2<f64>, Array1<f64>),
    pub regressor: (Array2<f64>, Array1<f64>),
}

impl ParamGrads {
    pub fn zeros_like(params: &DetectorParams) -> Self {
        let zero2 = |w: &Array2<f64>| Array2::zeros(w.dim());
        let zero1 = |b: &Array1<f64>| Array1::zeros(b.len());
        Self {
            backbone: params
                .backbone
                .iter()
                .map(|b| (zero2(&b.weight), zero1(&b.bias)))
                .collect(),
            proposal: (zero2(&params.proposal.weight), zero1(&params.proposal.bias)),
            roi_head: params
                .roi_head
                .iter()
                .map(|l| (zero2(&l.weight), zero1(&l.bias)))
                .collect(),
            classifier: (
                zero2(&params.classifier.weight),
                zero1(&params.classifier.bias),
            ),
            regressor: (
                zero2(&params.regressor.weight),
                zero1(&params.regressor.bias),
            ),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            a.0 += &b.0;
            a.1 += &b.1;
        }
        self.proposal.0 += &other.proposal.0;
        self.proposal.1 += &other.proposal.1;
        for (a, b) in self.roi_head.iter_mut().zip(&other.roi_head) {
            a.0 += &b.0;
            a.1 += &b.1;
        }
        self.classifier.0 += &other.classifier.0;
        self.classifier.1 += &other.classifier.1;
        self.regressor.0 += &other.regressor.0;
        self.regressor.1 += &other.regressor.1;
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in self.backbone.iter_mut() {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
        for pair in [
            &mut self.proposal,
            &mut self.classifier,
            &mut self.regressor,
        ] {
            pair.0.mapv_inplace(|v| v * s);
            pair.1.mapv_inplace(|v| v * s);
        }
        for (w, b) in self.roi_head.iter_mut() {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
    }

    /// Flattened view of every gradient value, component-tagged. Probe order
    /// is deterministic.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.backbone {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.extend(self.proposal.0.iter());
        out.extend(self.proposal.1.iter());
        for (w, b) in &self.roi_head {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.extend(self.classifier.0.iter());
        out.extend(self.classifier.1.iter());
        out.extend(self.regressor.0.iter());
        out.extend(self.regressor.1.iter());
        out
    }
}

/// Per-component effective learning rates: `lr(c) = global_lr * alpha(c)`,
/// forced to zero for frozen components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub global_lr: f64,
    pub scale: BTreeMap<Component, f64>,
    pub frozen: BTreeSet<Component>,
    /// Freeze the first n backbone blocks even when the backbone trains.
    pub frozen_backbone_blocks: usize,
}

impl LrSchedule {
    pub fn uniform(global_lr: f64) -> Self {
        Self {
            global_lr,
            scale: Component::ALL.iter().map(|&c| (c, 1.0)).collect(),
            frozen: BTreeSet::new(),
            frozen_backbone_blocks: 0,
        }
    }

    pub fn with_global_lr(&self, global_lr: f64) -> Self {
        Self {
            global_lr,
            ..self.clone()
        }
    }

    pub fn effective_lr(&self, component: Component) -> f64 {
        if self.frozen.contains(&component) {
            0.0
        } else {
            self.global_lr * self.scale.get(&component).copied().unwrap_or(1.0)
        }
    }

    fn backbone_block_lr(&self, block: usize) -> f64 {
        if block < self.frozen_backbone_blocks {
            0.0
        } else {
            self.effective_lr(Component::Backbone)
        }
    }
}

/// Plain momentum SGD: `m = mu*m + (g + wd*w); w -= lr_eff * m`.
///
/// The learning rate stays outside the momentum buffer, so scaling the
/// global rate by s and alpha by 1/s produces bit-identical steps. Frozen
/// tensors are skipped entirely (no decay, no buffer update).
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: ParamGrads,
}

fn update_pair(
    weight: &mut Array2<f64>,
    bias: &mut Array1<f64>,
    grad: &(Array2<f64>, Array1<f64>),
    buffer: &mut (Array2<f64>, Array1<f64>),
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    if lr == 0.0 {
        return;
    }
    azip_update(weight, &grad.0, &mut buffer.0, lr, momentum, weight_decay);
    azip_update1(bias, &grad.1, &mut buffer.1, lr, momentum, weight_decay);
}

fn azip_update(
    w: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    lr: f64,
    momentum: f64,
    wd: f64,
) {
    ndarray::Zip::from(w).and(g).and(m).for_each(|w, &g, m| {
        *m = momentum * *m + (g + wd * *w);
        *w -= lr * *m;
    });
}

fn azip_update1(
    w: &mut Array1<f64>,
    g: &Array1<f64>,
    m: &mut Array1<f64>,
    lr: f64,
    momentum: f64,
    wd: f64,
) {
    ndarray::Zip::from(w).and(g).and(m).for_each(|w, &g, m| {
        *m = momentum * *m + (g + wd * *w);
        *w -= lr * *m;
    });
}

impl MomentumSgd {
    pub fn new(momentum: f64, weight_decay: f64, params: &DetectorParams) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: ParamGrads::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut DetectorParams, grads: &ParamGrads, lr: &LrSchedule) {
        for (k, block) in params.backbone.iter_mut().enumerate() {
            update_pair(
                &mut block.weight,
                &mut block.bias,
                &grads.backbone[k],
                &mut self.buffers.backbone[k],
                lr.backbone_block_lr(k),
                self.momentum,
                self.weight_decay,
            );
        }
        update_pair(
            &mut params.proposal.weight,
            &mut params.proposal.bias,
            &grads.proposal,
            &mut self.buffers.proposal,
            lr.effective_lr(Component::Proposal),
            self.momentum,
            self.weight_decay,
        );
        for (k, layer) in params.roi_head.iter_mut().enumerate() {
            update_pair(
                &mut layer.weight,
                &mut layer.bias,
                &grads.roi_head[k],
                &mut self.buffers.roi_head[k],
                lr.effective_lr(Component::RoiHead),
                self.momentum,
                self.weight_decay,
            );
        }
        let bl_lr = lr.effective_lr(Component::BaseLearner);
        update_pair(
            &mut params.classifier.weight,
            &mut params.classifier.bias,
            &grads.classifier,
            &mut self.buffers.classifier,
            bl_lr,
            self.momentum,
            self.weight_decay,
        );
        update_pair(
            &mut params.regressor.weight,
            &mut params.regressor.bias,
            &grads.regressor,
            &mut self.buffers.regressor,
            bl_lr,
            self.momentum,
            self.weight_decay,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ClassifierKind;

    fn tiny_params(seed: u64) -> DetectorParams {
        DetectorParams::new(&[0, 1].into(), ClassifierKind::Linear, 64, seed)
    }

    fn unit_grads(params: &DetectorParams) -> ParamGrads {
        let mut g = ParamGrads::zeros_like(params);
        g.classifier.0.fill(0.5);
        g.backbone[0].0.fill(0.25);
        g.roi_head[1].1.fill(-0.125);
        g
    }

    #[test]
    fn lr_scale_equivalence_on_one_step() {
        // global_lr g with alpha s equals global_lr g*s with alpha 1.
        let params = tiny_params(3);
        let grads = unit_grads(&params);

        let mut a = params.clone();
        let mut opt_a = MomentumSgd::new(0.9, 0.0, &a);
        let mut sched_a = LrSchedule::uniform(0.02);
        sched_a.scale.insert(Component::RoiHead, 0.5);
        opt_a.step(&mut a, &grads, &sched_a);

        let mut b = params.clone();
        let mut opt_b = MomentumSgd::new(0.9, 0.0, &b);
        let sched_b = LrSchedule::uniform(0.01);
        opt_b.step(&mut b, &grads, &sched_b);

        assert_eq!(a.roi_head[0].weight, b.roi_head[0].weight);
        assert_eq!(a.roi_head[1].bias, b.roi_head[1].bias);
    }

    #[test]
    fn frozen_component_is_bitwise_unchanged() {
        let params = tiny_params(5);
        let mut grads = ParamGrads::zeros_like(&params);
        grads.backbone[0].0.fill(1.0);
        grads.backbone[2].1.fill(1.0);
        grads.classifier.0.fill(1.0);

        let mut p = params.clone();
        let mut opt = MomentumSgd::new(0.9, 1e-4, &p);
        let mut sched = LrSchedule::uniform(0.1);
        sched.frozen.insert(Component::Backbone);
        for _ in 0..5 {
            opt.step(&mut p, &grads, &sched);
        }
        for (before, after) in params.backbone.iter().zip(&p.backbone) {
            assert_eq!(before.weight, after.weight);
            assert_eq!(before.bias, after.bias);
        }
        assert_ne!(params.classifier.weight, p.classifier.weight);
    }

    #[test]
    fn partial_backbone_freeze_stops_early_blocks_only() {
        let params = tiny_params(7);
        let mut grads = ParamGrads::zeros_like(&params);
        for (w, _) in grads.backbone.iter_mut() {
            w.fill(1.0);
        }
        let mut p = params.clone();
        let mut opt = MomentumSgd::new(0.9, 0.0, &p);
        let mut sched = LrSchedule::uniform(0.1);
        sched.frozen_backbone_blocks = 1;
        opt.step(&mut p, &grads, &sched);
        assert_eq!(params.backbone[0].weight, p.backbone[0].weight);
        assert_ne!(params.backbone[1].weight, p.backbone[1].weight);
        assert_ne!(params.backbone[2].weight, p.backbone[2].weight);
    }

    #[test]
    fn weight_decay_shrinks_weights_without_gradient() {
        let params = tiny_params(9);
        let grads = ParamGrads::zeros_like(&params);
        let mut p = params.clone();
        let mut opt = MomentumSgd::new(0.0, 0.1, &p);
        opt.step(&mut p, &grads, &LrSchedule::uniform(0.5));
        let before = params.classifier.weight[[0, 0]];
        let after = p.classifier.weight[[0, 0]];
        assert!((after - before * (1.0 - 0.05)).abs() < 1e-12);
    }
}

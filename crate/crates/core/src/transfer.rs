//! Few-shot transfer: classifier extension, component-wise freeze and
//! learning-rate scaling, dropout regularization, the optional proposal-head
//! gradient stop, and the training loop over the class-balanced few-shot set.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{
    augment, compute_loss_and_grads, Component, DetectorParams, LossOptions, LrSchedule,
    MomentumSgd, PRETRAIN_PROPOSAL_CAP,
};
use crate::error::{CoreError, Result};
use crate::synthgen::{sample_batch, BatchMode, ClassId, FewShotSet};

const TRANSFER_MOMENTUM: f64 = 0.9;
const TRANSFER_WEIGHT_DECAY: f64 = 1e-4;
const NOVEL_ROW_STD: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferConfig {
    pub global_lr: f64,
    pub lr_scale: BTreeMap<Component, f64>,
    pub frozen: BTreeSet<Component>,
    /// With an unfrozen backbone, still freeze its first n blocks.
    pub frozen_up_to_block: usize,
    pub dropout_rate: f64,
    pub gradient_stop_rpn: bool,
    pub proposal_cap_multiplier: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    pub seed: u64,
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_lr <= 0.0 {
            return Err(CoreError::Config("global_lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::Config("dropout_rate must lie in [0,1)".into()));
        }
        if self.proposal_cap_multiplier <= 0.0 {
            return Err(CoreError::Config(
                "proposal_cap_multiplier must be > 0".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn proposal_cap(&self) -> usize {
        ((PRETRAIN_PROPOSAL_CAP as f64 * self.proposal_cap_multiplier).round() as usize).max(1)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            global_lr: self.global_lr,
            scale: self.lr_scale.clone(),
            frozen: self.frozen.clone(),
            frozen_backbone_blocks: self.frozen_up_to_block,
        }
    }
}

/// One evaluation sample on the transfer curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub base_ap50: f64,
    pub novel_ap50: f64,
}

/// What the injected evaluator reports back to the loop.
#[derive(Debug, Clone, Copy)]
pub struct EvalSignal {
    pub base_ap50: f64,
    pub novel_ap50: f64,
    /// Stop training after recording this point.
    pub stop: bool,
}

/// Evaluation cadence and metric, injected by the caller; the transfer loop
/// itself never measures anything.
pub struct EvalHook<'a> {
    pub interval: u64,
    pub call: Box<dyn FnMut(u64, &DetectorParams) -> Result<EvalSignal> + 'a>,
}

impl<'a> EvalHook<'a> {
    pub fn new<F>(interval: u64, call: F) -> Self
    where
        F: FnMut(u64, &DetectorParams) -> Result<EvalSignal> + 'a,
    {
        Self {
            interval,
            call: Box::new(call),
        }
    }

    /// An evaluator that never evaluates (interval 0).
    pub fn none() -> Self {
        Self {
            interval: 0,
            call: Box::new(|_, _| {
                Ok(EvalSignal {
                    base_ap50: 0.0,
                    novel_ap50: 0.0,
                    stop: false,
                })
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub params: DetectorParams,
    pub curve: Vec<CurvePoint>,
    pub config_echo: TransferConfig,
}

/// Grow the classifier by the novel classes: new rows are random
/// (zero-mean Gaussian, std 0.01, zero bias), placed before the background
/// row, which keeps its weights while its index moves up. Everything else
/// is bit-identical to the input.
pub fn extend_classifier(
    params: &DetectorParams,
    novel_ids: &BTreeSet<ClassId>,
    seed: u64,
) -> Result<DetectorParams> {
    if params.extended {
        return Err(CoreError::Config(
            "classifier has already been extended".into(),
        ));
    }
    if novel_ids.is_empty() {
        return Err(CoreError::Config("no novel classes given".into()));
    }
    for id in novel_ids {
        if params.class_ids.contains(id) {
            return Err(CoreError::Config(format!(
                "class {id} is already present in the classifier"
            )));
        }
    }

    let dim = params.classifier.weight.ncols();
    let old_rows = params.classifier.weight.nrows();
    let new_rows = old_rows + novel_ids.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, NOVEL_ROW_STD).unwrap();

    let mut weight = ndarray::Array2::<f64>::zeros((new_rows, dim));
    let mut bias = ndarray::Array1::<f64>::zeros(new_rows);
    // Base rows keep their positions.
    for r in 0..params.num_base {
        weight.row_mut(r).assign(&params.classifier.weight.row(r));
        bias[r] = params.classifier.bias[r];
    }
    for (i, _) in novel_ids.iter().enumerate() {
        let r = params.num_base + i;
        for k in 0..dim {
            weight[[r, k]] = dist.sample(&mut rng);
        }
    }
    // Background moves from the old last row to the new last row.
    let old_bg = params.num_base;
    let new_bg = new_rows - 1;
    weight
        .row_mut(new_bg)
        .assign(&params.classifier.weight.row(old_bg));
    bias[new_bg] = params.classifier.bias[old_bg];

    let mut out = params.clone();
    out.classifier.weight = weight;
    out.classifier.bias = bias;
    out.class_ids.extend(novel_ids.iter().copied());
    out.extended = true;
    Ok(out)
}

/// The few-shot transfer loop: only non-frozen components move, each at
/// `global_lr * alpha(component)`; momentum buffers start fresh. The
/// evaluator is invoked at iteration 0, at every `interval`, and can stop
/// the run early. Deterministic given the config seed.
pub fn fewshot_transfer(
    params: &DetectorParams,
    fewshot: &FewShotSet,
    config: &TransferConfig,
    evaluator: &mut EvalHook<'_>,
) -> Result<TransferResult> {
    config.validate()?;
    if !params.extended {
        return Err(CoreError::Config(
            "transfer requires an extended classifier".into(),
        ));
    }
    if fewshot.images.is_empty() {
        return Err(CoreError::Data("few-shot set is empty".into()));
    }

    let mut params = params.clone();
    let mut optimizer = MomentumSgd::new(TRANSFER_MOMENTUM, TRANSFER_WEIGHT_DECAY, &params);
    let schedule = config.schedule();
    let cap = config.proposal_cap();
    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut aug_rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0xa9b7_3c11);

    let mut evaluate =
        |iteration: u64, params: &DetectorParams, curve: &mut Vec<CurvePoint>| -> Result<bool> {
            let signal = (evaluator.call)(iteration, params)?;
            curve.push(CurvePoint {
                iteration,
                base_ap50: signal.base_ap50,
                novel_ap50: signal.novel_ap50,
            });
            Ok(signal.stop)
        };

    if evaluator.interval > 0 && evaluate(0, &params, &mut curve)? {
        return Ok(TransferResult {
            params,
            curve,
            config_echo: config.clone(),
        });
    }

    for iteration in 1..=config.iterations {
        let batch_seed = config.seed ^ iteration.wrapping_mul(0x517c_c1b7_2722_0a95);
        let batch: Vec<_> = sample_batch(fewshot, config.batch_mode, config.batch_size, batch_seed)
            .iter()
            .map(|img| augment::apply(img, &augment::Augmentation::sample(&mut aug_rng)))
            .collect();
        let opts = LossOptions {
            proposal_cap: cap,
            dropout_rate: config.dropout_rate,
            seed: batch_seed ^ 0xd20f,
            stop_rpn_feature_grad: config.gradient_stop_rpn,
        };
        let (_, grads) = match compute_loss_and_grads(&params, &batch, &opts) {
            Ok(v) => v,
            Err(CoreError::Numerical { component, .. }) => {
                return Err(CoreError::numerical(component, Some(iteration)))
            }
            Err(e) => return Err(e),
        };
        optimizer.step(&mut params, &grads, &schedule);

        if evaluator.interval > 0
            && iteration % evaluator.interval == 0
            && evaluate(iteration, &params, &mut curve)?
        {
            break;
        }
    }

    Ok(TransferResult {
        params,
        curve,
        config_echo: config.clone(),
    })
}

/// The two adaptation presets.
///
/// `ptf`: backbone frozen; base learner and proposal head at 1x, RoI head at
/// 0.5x; dropout 0.8; image-level batches; doubled proposal cap.
/// `ptf_ki`: additionally unfreezes the backbone at 0.01x (first block still
/// frozen) and stops the proposal-head gradient into the backbone.
pub fn preset_configs() -> BTreeMap<String, TransferConfig> {
    let mut scale = BTreeMap::new();
    scale.insert(Component::Backbone, 1.0);
    scale.insert(Component::Proposal, 1.0);
    scale.insert(Component::RoiHead, 0.5);
    scale.insert(Component::BaseLearner, 1.0);

    let ptf = TransferConfig {
        global_lr: 0.02,
        lr_scale: scale.clone(),
        frozen: [Component::Backbone].into(),
        frozen_up_to_block: 0,
        dropout_rate: 0.8,
        gradient_stop_rpn: false,
        proposal_cap_multiplier: 2.0,
        iterations: 3000,
        batch_size: 4,
        batch_mode: BatchMode::ImageLevel,
        seed: 0,
    };

    let mut ki_scale = scale;
    ki_scale.insert(Component::Backbone, 0.01);
    let ptf_ki = TransferConfig {
        lr_scale: ki_scale,
        frozen: BTreeSet::new(),
        frozen_up_to_block: 1,
        gradient_stop_rpn: true,
        ..ptf.clone()
    };

    [("ptf".to_string(), ptf), ("ptf_ki".to_string(), ptf_ki)].into()
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &std::path::Path) -> Result<()> {
    let mut s = String::from("iteration,bAP50,nAP50\n");
    for p in curve {
        s.push_str(&format!(
            "{},{:.6},{:.6}\n",
            p.iteration, p.base_ap50, p.novel_ap50
        ));
    }
    std::fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

//! The toy two-stage detector.
//!
//! Embedding model: a three-block convolutional backbone (stride-2 blocks,
//! channels 16/32/64, output stride 8), a one-anchor proposal head (1x1 conv
//! emitting one objectness logit and four box deltas per cell) and an RoI
//! head (RoI-align to 4x4x64, two fully connected layers, 64-d embedding).
//! Base learner: a (C+1)-row classifier (background last) and a
//! class-agnostic 4-output box regressor.

pub mod augment;
mod boxes;
mod checkpoint;
mod nn;
mod optim;
mod pipeline;

pub use boxes::{anchor_grid, clip_to_image, decode_deltas, encode_deltas, nms};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{Component, LrSchedule, MomentumSgd, ParamGrads};

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::evalkit::DetectionRecord;
use crate::synthgen::{AnnotatedImage, BBox, ClassId};

pub const EMBED_DIM: usize = 64;
pub const ROI_POOL: usize = 4;
pub const FEATURE_STRIDE: usize = 8;
pub const ANCHOR_SIDE: f64 = 32.0;
pub const FC1_DIM: usize = 128;
pub const BACKBONE_CHANNELS: [usize; 3] = [16, 32, 64];

/// Post-NMS proposal caps: pretraining, and inference / transfer (doubled).
pub const PRETRAIN_PROPOSAL_CAP: usize = 32;
pub const INFERENCE_PROPOSAL_CAP: usize = 64;

pub const COSINE_TEMPERATURE: f64 = 20.0;

/// Proposal/ground-truth assignment thresholds: positive at IoU >= 0.5,
/// background below 0.3, ignored in between.
pub const POSITIVE_IOU: f64 = 0.5;
pub const BACKGROUND_IOU: f64 = 0.3;

pub(crate) const RPN_NMS_IOU: f64 = 0.7;
const DETECT_SCORE_THRESHOLD: f64 = 0.05;
const DETECT_NMS_IOU: f64 = 0.5;
const DETECT_MAX_PER_IMAGE: usize = 50;

const CLASSIFIER_INIT_STD: f64 = 0.01;
const REGRESSOR_INIT_STD: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ClassifierKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ClassifierKind::Linear),
            "cosine" => Ok(ClassifierKind::Cosine),
            other => Err(CoreError::Config(format!(
                "unknown classifier kind {other:?}"
            ))),
        }
    }
}

/// Convolution parameters stored GEMM-ready: weight `[C_out, C_in*k*k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Component-partitioned detector weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub backbone: Vec<ConvBlock>,
    pub proposal: ConvBlock,
    pub roi_head: Vec<LinearLayer>,
    pub classifier: LinearLayer,
    pub regressor: LinearLayer,
    pub classifier_kind: ClassifierKind,
    /// Classifier row i predicts class `class_ids[i]`; the background row
    /// sits last, at index `class_ids.len()`.
    pub class_ids: Vec<ClassId>,
    /// Rows `0..num_base` came from base pretraining.
    pub num_base: usize,
    /// Set once the classifier has been extended with novel rows.
    pub extended: bool,
    pub image_size: usize,
}

impl DetectorParams {
    pub fn new(
        base_ids: &BTreeSet<ClassId>,
        classifier_kind: ClassifierKind,
        image_size: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let he = |rng: &mut ChaCha12Rng, rows: usize, cols: usize, fan_in: usize| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        let gaussian = |rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };

        let mut backbone = Vec::with_capacity(3);
        let mut in_ch = 3;
        for &out_ch in &BACKBONE_CHANNELS {
            let fan_in = in_ch * 9;
            backbone.push(ConvBlock {
                weight: he(&mut rng, out_ch, fan_in, fan_in),
                bias: Array1::zeros(out_ch),
                kernel: 3,
                in_ch,
                out_ch,
                stride: 2,
                padding: 1,
            });
            in_ch = out_ch;
        }

        let proposal = ConvBlock {
            weight: gaussian(&mut rng, 5, EMBED_DIM, CLASSIFIER_INIT_STD),
            bias: Array1::zeros(5),
            kernel: 1,
            in_ch: EMBED_DIM,
            out_ch: 5,
            stride: 1,
            padding: 0,
        };

        let flat = EMBED_DIM * ROI_POOL * ROI_POOL;
        let roi_head = vec![
            LinearLayer {
                weight: he(&mut rng, FC1_DIM, flat, flat),
                bias: Array1::zeros(FC1_DIM),
            },
            LinearLayer {
                weight: he(&mut rng, EMBED_DIM, FC1_DIM, FC1_DIM),
                bias: Array1::zeros(EMBED_DIM),
            },
        ];

        let class_ids: Vec<ClassId> = base_ids.iter().copied().collect();
        let rows = class_ids.len() + 1;
        let classifier = LinearLayer {
            weight: gaussian(&mut rng, rows, EMBED_DIM, CLASSIFIER_INIT_STD),
            bias: Array1::zeros(rows),
        };
        let regressor = LinearLayer {
            weight: gaussian(&mut rng, 4, EMBED_DIM, REGRESSOR_INIT_STD),
            bias: Array1::zeros(4),
        };

        Self {
            backbone,
            proposal,
            roi_head,
            classifier,
            regressor,
            classifier_kind,
            num_base: class_ids.len(),
            class_ids,
            extended: false,
            image_size,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.class_ids.len() + 1
    }

    pub fn background_row(&self) -> usize {
        self.class_ids.len()
    }

    pub fn row_of_class(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn novel_ids(&self) -> &[ClassId] {
        &self.class_ids[self.num_base..]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub classifier_kind: ClassifierKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            iterations: 1500,
            seed: 0,
            classifier_kind: ClassifierKind::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(CoreError::Config("base_lr must be > 0".into()));
        }
        if self.iterations < 1 {
            return Err(CoreError::Config("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredProposal {
    pub bbox: BBox,
    pub score: f64,
}

/// Per-image forward products exposed to callers.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub proposals: Vec<ScoredProposal>,
    /// `[N, d]` RoI-head embeddings (pre-dropout).
    pub embeddings: Array2<f64>,
    /// `[N, C+1]` classifier scores.
    pub class_logits: Array2<f64>,
    /// `[N, 4]` class-agnostic regression deltas.
    pub box_deltas: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub proposal_cap: usize,
    pub dropout_rate: f64,
    pub training: bool,
    /// Seeds the dropout mask stream when `training` is set.
    pub dropout_seed: u64,
}

impl ForwardOptions {
    pub fn inference(proposal_cap: usize) -> Self {
        Self {
            proposal_cap,
            dropout_rate: 0.0,
            training: false,
            dropout_seed: 0,
        }
    }
}

/// Loss components of the standard two-stage objective: the proposal-module
/// term (objectness plus anchor regression), classification cross-entropy
/// and the box regression term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn: f64,
    pub cls: f64,
    pub loc: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.rpn + self.cls + self.loc
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub proposal_cap: usize,
    pub dropout_rate: f64,
    /// Seeds the dropout stream; the same seed reproduces the same masks.
    pub seed: u64,
    /// Sever the feature-map gradient coming from the proposal-module loss
    /// (the proposal head itself still receives its gradient).
    pub stop_rpn_feature_grad: bool,
}

impl LossOptions {
    pub fn pretrain(seed: u64) -> Self {
        Self {
            proposal_cap: PRETRAIN_PROPOSAL_CAP,
            dropout_rate: 0.0,
            seed,
            stop_rpn_feature_grad: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: ClassId,
}

fn check_image_shape(params: &DetectorParams, pixels: &Array3<f64>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    if c != 3 || h != params.image_size || w != params.image_size {
        return Err(CoreError::Shape(format!(
            "expected [3, {s}, {s}] input, got [{c}, {h}, {w}]",
            s = params.image_size
        )));
    }
    Ok(())
}

/// Run the full detector on one image.
///
/// At most `proposal_cap` proposals survive score-ordered NMS. Dropout is
/// applied to the RoI-head embedding immediately before the classifier, and
/// only when `training` is set; inference is a pure function of its inputs.
pub fn forward(
    params: &DetectorParams,
    pixels: &Array3<f64>,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    check_image_shape(params, pixels)?;
    let fwd = pipeline::forward_image(
        params,
        pixels,
        opts.proposal_cap,
        if opts.training { opts.dropout_rate } else { 0.0 },
        opts.dropout_seed,
    )?;
    Ok(ForwardOutput {
        proposals: fwd.proposals.clone(),
        embeddings: fwd.emb.clone(),
        class_logits: fwd.class_logits.clone(),
        box_deltas: fwd.box_deltas.clone(),
    })
}

/// Total loss components over a batch, averaged per image.
pub fn compute_loss(
    params: &DetectorParams,
    batch: &[AnnotatedImage],
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    Ok(pipeline::loss_and_grads(params, batch, opts)?.0)
}

/// Loss components plus analytic gradients for every parameter tensor.
pub fn compute_loss_and_grads(
    params: &DetectorParams,
    batch: &[AnnotatedImage],
    opts: &LossOptions,
) -> Result<(LossBreakdown, ParamGrads)> {
    pipeline::loss_and_grads(params, batch, opts)
}

/// Embed every ground-truth box of `image` under `views` random augmented
/// views (random scaling and horizontal flip, the training augmentations).
/// RoI pooling reads the ground-truth boxes, not predicted proposals, and
/// dropout is disabled. Returns `annotations x views` `(class, embedding)`
/// pairs, deterministic given `seed`.
pub fn extract_instance_features(
    params: &DetectorParams,
    image: &AnnotatedImage,
    views: usize,
    seed: u64,
) -> Result<Vec<(ClassId, Array1<f64>)>> {
    if image.labels.is_empty() {
        return Err(CoreError::Data(
            "cannot extract instance features from an image without annotations".into(),
        ));
    }
    if views < 1 {
        return Err(CoreError::Config("views must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(image.labels.len() * views);
    for _ in 0..views {
        let aug = augment::Augmentation::sample(&mut rng);
        let view = augment::apply(image, &aug);
        let emb = pipeline::embed_boxes(params, &view.pixels, &view.boxes)?;
        for (row, &label) in view.labels.iter().enumerate() {
            out.push((label, emb.row(row).to_owned()));
        }
    }
    Ok(out)
}

/// Inference post-processing: per-class scores from the softmax, regressor
/// deltas applied to each proposal, score threshold, per-class NMS.
pub fn detect(
    params: &DetectorParams,
    pixels: &Array3<f64>,
    proposal_cap: usize,
) -> Result<Vec<Detection>> {
    let out = forward(params, pixels, &ForwardOptions::inference(proposal_cap))?;
    let size = params.image_size as f64;
    let probs = pipeline::softmax_of(&out.class_logits);

    let mut detections: Vec<Detection> = Vec::new();
    for (row, class_id) in params.class_ids.iter().enumerate() {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, prop) in out.proposals.iter().enumerate() {
            let score = probs[[i, row]];
            if score < DETECT_SCORE_THRESHOLD {
                continue;
            }
            let deltas = [
                out.box_deltas[[i, 0]],
                out.box_deltas[[i, 1]],
                out.box_deltas[[i, 2]],
                out.box_deltas[[i, 3]],
            ];
            let refined = clip_to_image(&decode_deltas(&prop.bbox, &deltas), size, size);
            if refined.area() <= 0.0 {
                continue;
            }
            boxes.push(refined);
            scores.push(score);
        }
        for idx in nms(&boxes, &scores, DETECT_NMS_IOU, DETECT_MAX_PER_IMAGE) {
            detections.push(Detection {
                bbox: boxes[idx],
                score: scores[idx],
                class_id: *class_id,
            });
        }
    }
    detections.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox.x0.total_cmp(&b.bbox.x0))
    });
    detections.truncate(DETECT_MAX_PER_IMAGE);
    Ok(detections)
}

/// Run [`detect`] over a whole evaluation set, producing metric records.
pub fn detect_dataset(
    params: &DetectorParams,
    images: &[AnnotatedImage],
    proposal_cap: usize,
) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    for (image_id, img) in images.iter().enumerate() {
        for det in detect(params, &img.pixels, proposal_cap)? {
            records.push(DetectionRecord {
                image_id,
                bbox: det.bbox,
                score: det.score,
                class_id: det.class_id,
            });
        }
    }
    Ok(records)
}

/// Raw scored proposals per image, for proposal-recall evaluation.
pub fn collect_proposals(
    params: &DetectorParams,
    images: &[AnnotatedImage],
    proposal_cap: usize,
) -> Result<BTreeMap<usize, Vec<(BBox, f64)>>> {
    let mut map = BTreeMap::new();
    for (image_id, img) in images.iter().enumerate() {
        let out = forward(params, &img.pixels, &ForwardOptions::inference(proposal_cap))?;
        map.insert(
            image_id,
            out.proposals.iter().map(|p| (p.bbox, p.score)).collect(),
        );
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub rpn: f64,
    pub cls: f64,
    pub loc: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub params: DetectorParams,
    pub log: Vec<LossRow>,
}

const WARMUP_ITERS: u64 = 50;
const WARMUP_FACTOR: f64 = 0.1;

pub(crate) fn warmup_lr(base_lr: f64, iteration: u64) -> f64 {
    if iteration < WARMUP_ITERS {
        let t = iteration as f64 / WARMUP_ITERS as f64;
        base_lr * (WARMUP_FACTOR + (1.0 - WARMUP_FACTOR) * t)
    } else {
        base_lr
    }
}

/// Base pretraining: minimize the standard loss plus weight decay over the
/// iteration budget with momentum SGD. All components train at the base
/// learning rate; the proposal cap is the pretraining cap and dropout is off.
pub fn pretrain_base(
    base_data: &[AnnotatedImage],
    base_ids: &BTreeSet<ClassId>,
    config: &TrainConfig,
) -> Result<PretrainResult> {
    config.validate()?;
    if base_data.is_empty() {
        return Err(CoreError::Data("base training set is empty".into()));
    }
    for img in base_data {
        for l in &img.labels {
            if !base_ids.contains(l) {
                return Err(CoreError::Data(format!(
                    "base training set contains non-base label {l}"
                )));
            }
        }
    }
    let image_size = base_data[0].pixels.dim().1;

    let mut params = DetectorParams::new(
        base_ids,
        config.classifier_kind,
        image_size,
        config.seed ^ 0x5eed_1a17,
    );
    let mut optimizer = MomentumSgd::new(config.momentum, config.weight_decay, &params);
    let schedule = LrSchedule::uniform(config.base_lr);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.iterations as usize);

    for iteration in 0..config.iterations {
        let batch: Vec<AnnotatedImage> = (0..config.batch_size)
            .map(|_| {
                let idx = rand::Rng::gen_range(&mut rng, 0..base_data.len());
                let aug = augment::Augmentation::sample(&mut rng);
                augment::apply(&base_data[idx], &aug)
            })
            .collect();
        let opts = LossOptions::pretrain(config.seed ^ iteration.wrapping_mul(0x9e37_79b9));
        let (loss, grads) = match compute_loss_and_grads(&params, &batch, &opts) {
            Ok(v) => v,
            Err(CoreError::Numerical { component, .. }) => {
                return Err(CoreError::numerical(component, Some(iteration)))
            }
            Err(e) => return Err(e),
        };
        let lr = warmup_lr(config.base_lr, iteration);
        optimizer.step(&mut params, &grads, &schedule.with_global_lr(lr));
        log.push(LossRow {
            iteration,
            rpn: loss.rpn,
            cls: loss.cls,
            loc: loss.loc,
        });
    }

    Ok(PretrainResult { params, log })
}

pub fn write_loss_csv(log: &[LossRow], path: &std::path::Path) -> Result<()> {
    let mut s = String::from("iteration,L_rpn,L_cls,L_loc\n");
    for row in log {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.iteration, row.rpn, row.cls, row.loc
        ));
    }
    std::fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

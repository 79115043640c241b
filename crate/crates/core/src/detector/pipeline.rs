//! Forward pipeline with cached activations and the matching backward pass.
//!
//! Gradients flow through the RoI head into the feature map via RoI-align
//! (proposal boxes are treated as constants, as usual for two-stage
//! detectors) and through the proposal head. The proposal-head-to-backbone
//! path can be severed for the gradient-stop transfer strategy.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::boxes::{anchor_grid, clip_to_image, decode_deltas, encode_deltas, nms};
use super::nn::{
    bce_with_logit, conv2d_backward, conv2d_forward, dropout_mask, linear_backward,
    linear_forward, relu2_backward_inplace, relu2_inplace, relu_backward_inplace, relu_inplace,
    roi_align, roi_align_backward, sigmoid, smooth_l1, smooth_l1_grad, softmax_rows,
    BilinearTap, ConvCache,
};
use super::optim::ParamGrads;
use super::{
    ClassifierKind, ConvBlock, DetectorParams, LossBreakdown, LossOptions, ScoredProposal,
    ANCHOR_SIDE, BACKGROUND_IOU, COSINE_TEMPERATURE, EMBED_DIM, FEATURE_STRIDE, POSITIVE_IOU,
    ROI_POOL, RPN_NMS_IOU,
};
use crate::error::{CoreError, Result};
use crate::evalkit::match_iou;
use crate::synthgen::{AnnotatedImage, BBox};

const NORM_EPS: f64 = 1e-12;

pub(super) fn softmax_of(logits: &Array2<f64>) -> Array2<f64> {
    softmax_rows(logits)
}

struct BackboneForward {
    post: Vec<Array3<f64>>,
    caches: Vec<ConvCache>,
}

fn backbone_forward(params: &DetectorParams, pixels: &Array3<f64>) -> BackboneForward {
    let mut post = Vec::with_capacity(params.backbone.len());
    let mut caches = Vec::with_capacity(params.backbone.len());
    let mut x = pixels.clone();
    for block in &params.backbone {
        let (mut out, cache) = conv2d_forward(
            &x,
            &block.weight,
            &block.bias,
            block.kernel,
            block.stride,
            block.padding,
        );
        relu_inplace(&mut out);
        caches.push(cache);
        post.push(out.clone());
        x = out;
    }
    BackboneForward { post, caches }
}

pub(super) struct ImageForward {
    post: Vec<Array3<f64>>,
    caches: Vec<ConvCache>,
    rpn_cache: ConvCache,
    pub rpn_raw: Array3<f64>,
    pub anchors: Vec<BBox>,
    pub proposals: Vec<ScoredProposal>,
    /// Index of each kept proposal's anchor cell.
    pub proposal_anchor: Vec<usize>,
    roi_flat: Array2<f64>,
    taps: Vec<Vec<BilinearTap>>,
    h1: Array2<f64>,
    pub emb: Array2<f64>,
    emb_dropped: Array2<f64>,
    dropout_mask: Option<Array2<f64>>,
    pub class_logits: Array2<f64>,
    pub box_deltas: Array2<f64>,
}

fn roi_stack(
    params: &DetectorParams,
    feat: &Array3<f64>,
    boxes: &[BBox],
) -> (Array2<f64>, Vec<Vec<BilinearTap>>, Array2<f64>, Array2<f64>) {
    let flat_dim = EMBED_DIM * ROI_POOL * ROI_POOL;
    let scale = 1.0 / FEATURE_STRIDE as f64;
    let mut roi_flat = Array2::zeros((boxes.len(), flat_dim));
    let mut taps = Vec::with_capacity(boxes.len());
    for (i, bbox) in boxes.iter().enumerate() {
        let (row, t) = roi_align(feat, bbox, scale, ROI_POOL);
        roi_flat.row_mut(i).assign(&row);
        taps.push(t);
    }
    let mut h1 = linear_forward(&roi_flat, &params.roi_head[0].weight, &params.roi_head[0].bias);
    relu2_inplace(&mut h1);
    let mut emb = linear_forward(&h1, &params.roi_head[1].weight, &params.roi_head[1].bias);
    relu2_inplace(&mut emb);
    (roi_flat, taps, h1, emb)
}

fn classifier_scores(params: &DetectorParams, emb: &Array2<f64>) -> Array2<f64> {
    match params.classifier_kind {
        ClassifierKind::Linear => {
            linear_forward(emb, &params.classifier.weight, &params.classifier.bias)
        }
        ClassifierKind::Cosine => {
            let n = emb.nrows();
            let rows = params.classifier.weight.nrows();
            let mut scores = Array2::zeros((n, rows));
            for i in 0..n {
                let z = emb.row(i);
                let zn = z.dot(&z).sqrt();
                if zn < NORM_EPS {
                    continue;
                }
                for r in 0..rows {
                    let w = params.classifier.weight.row(r);
                    let wn = w.dot(&w).sqrt();
                    if wn < NORM_EPS {
                        continue;
                    }
                    scores[[i, r]] = COSINE_TEMPERATURE * z.dot(&w) / (zn * wn);
                }
            }
            scores
        }
    }
}

pub(super) fn forward_image(
    params: &DetectorParams,
    pixels: &Array3<f64>,
    proposal_cap: usize,
    dropout_rate: f64,
    dropout_seed: u64,
) -> Result<ImageForward> {
    if proposal_cap < 1 {
        return Err(CoreError::Config("proposal_cap must be >= 1".into()));
    }
    let (_, img_h, img_w) = pixels.dim();
    let bb = backbone_forward(params, pixels);
    let feat = bb.post.last().expect("backbone has blocks").clone();

    let (rpn_raw, rpn_cache) = conv2d_forward(
        &feat,
        &params.proposal.weight,
        &params.proposal.bias,
        1,
        1,
        0,
    );
    let (_, fh, fw) = rpn_raw.dim();
    let anchors = anchor_grid(fh, fw, FEATURE_STRIDE as f64, ANCHOR_SIDE);

    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (a, anchor) in anchors.iter().enumerate() {
        let (i, j) = (a / fw, a % fw);
        let deltas = [
            rpn_raw[[1, i, j]],
            rpn_raw[[2, i, j]],
            rpn_raw[[3, i, j]],
            rpn_raw[[4, i, j]],
        ];
        let decoded = clip_to_image(
            &decode_deltas(anchor, &deltas),
            img_w as f64,
            img_h as f64,
        );
        boxes.push(decoded);
        scores.push(sigmoid(rpn_raw[[0, i, j]]));
    }
    let keep = nms(&boxes, &scores, RPN_NMS_IOU, proposal_cap);
    let proposals: Vec<ScoredProposal> = keep
        .iter()
        .map(|&i| ScoredProposal {
            bbox: boxes[i],
            score: scores[i],
        })
        .collect();
    let proposal_boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();

    let (roi_flat, taps, h1, emb) = roi_stack(params, &feat, &proposal_boxes);

    let (emb_dropped, mask) = if dropout_rate > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(dropout_seed);
        let mask = dropout_mask(emb.dim(), dropout_rate, &mut rng);
        (&emb * &mask, Some(mask))
    } else {
        (emb.clone(), None)
    };

    let class_logits = classifier_scores(params, &emb_dropped);
    let box_deltas = linear_forward(&emb, &params.regressor.weight, &params.regressor.bias);

    Ok(ImageForward {
        post: bb.post,
        caches: bb.caches,
        rpn_cache,
        rpn_raw,
        anchors,
        proposals,
        proposal_anchor: keep,
        roi_flat,
        taps,
        h1,
        emb,
        emb_dropped,
        dropout_mask: mask,
        class_logits,
        box_deltas,
    })
}

/// Embeddings for externally supplied boxes (ground-truth RoI pooling).
pub(super) fn embed_boxes(
    params: &DetectorParams,
    pixels: &Array3<f64>,
    boxes: &[BBox],
) -> Result<Array2<f64>> {
    let bb = backbone_forward(params, pixels);
    let feat = bb.post.last().expect("backbone has blocks");
    let (_, _, _, emb) = roi_stack(params, feat, boxes);
    Ok(emb)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AnchorLabel {
    Positive(usize), // matched ground-truth index
    Negative,
    Ignore,
}

fn assign_anchors(anchors: &[BBox], gts: &[BBox]) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return labels;
    }
    let mut best_for_gt = vec![(0usize, 0.0f64); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut max_iou = 0.0;
        let mut argmax = 0usize;
        for (g, gt) in gts.iter().enumerate() {
            let iou = match_iou(anchor, gt);
            if iou > max_iou {
                max_iou = iou;
                argmax = g;
            }
            if iou > best_for_gt[g].1 {
                best_for_gt[g] = (a, iou);
            }
        }
        labels[a] = if max_iou >= POSITIVE_IOU {
            AnchorLabel::Positive(argmax)
        } else if max_iou < BACKGROUND_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    // The best anchor for each ground truth is positive regardless of IoU.
    for (g, &(a, iou)) in best_for_gt.iter().enumerate() {
        if iou > 0.0 {
            labels[a] = AnchorLabel::Positive(g);
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RoiLabel {
    Positive(usize),
    Background,
    Ignore,
}

fn assign_proposals(proposals: &[BBox], gts: &[BBox]) -> Vec<RoiLabel> {
    proposals
        .iter()
        .map(|p| {
            let mut max_iou = 0.0;
            let mut argmax = 0usize;
            for (g, gt) in gts.iter().enumerate() {
                let iou = match_iou(p, gt);
                if iou > max_iou {
                    max_iou = iou;
                    argmax = g;
                }
            }
            if max_iou >= POSITIVE_IOU {
                RoiLabel::Positive(argmax)
            } else if max_iou < BACKGROUND_IOU {
                RoiLabel::Background
            } else {
                RoiLabel::Ignore
            }
        })
        .collect()
}

/// Classifier backward for both kinds; returns the gradient w.r.t. the
/// (dropped) embedding and accumulates weight/bias gradients.
fn classifier_backward(
    params: &DetectorParams,
    emb_dropped: &Array2<f64>,
    d_logits: &Array2<f64>,
    grads: &mut ParamGrads,
) -> Array2<f64> {
    match params.classifier_kind {
        ClassifierKind::Linear => {
            let (d_emb, d_w, d_b) =
                linear_backward(d_logits, emb_dropped, &params.classifier.weight);
            grads.classifier.0 += &d_w;
            grads.classifier.1 += &d_b;
            d_emb
        }
        ClassifierKind::Cosine => {
            let (n, rows) = d_logits.dim();
            let mut d_emb = Array2::zeros(emb_dropped.dim());
            for i in 0..n {
                let z = emb_dropped.row(i);
                let zn = z.dot(&z).sqrt();
                if zn < NORM_EPS {
                    continue;
                }
                for r in 0..rows {
                    let g = d_logits[[i, r]];
                    if g == 0.0 {
                        continue;
                    }
                    let w = params.classifier.weight.row(r);
                    let wn = w.dot(&w).sqrt();
                    if wn < NORM_EPS {
                        continue;
                    }
                    let u = z.dot(&w);
                    let a = 1.0 / (wn * zn);
                    let gs = g * COSINE_TEMPERATURE;
                    for k in 0..z.len() {
                        d_emb[[i, k]] += gs * (w[k] * a - u * a * z[k] / (zn * zn));
                        grads.classifier.0[[r, k]] +=
                            gs * (z[k] * a - u * a * w[k] / (wn * wn));
                    }
                }
            }
            d_emb
        }
    }
}

/// Loss components and analytic gradients over a batch, averaged per image.
pub(super) fn loss_and_grads(
    params: &DetectorParams,
    batch: &[AnnotatedImage],
    opts: &LossOptions,
) -> Result<(LossBreakdown, ParamGrads)> {
    if batch.is_empty() {
        return Err(CoreError::Data("empty batch".into()));
    }
    for img in batch {
        if img.labels.is_empty() {
            return Err(CoreError::Data(
                "every training image must carry at least one annotation".into(),
            ));
        }
    }
    if !(0.0..1.0).contains(&opts.dropout_rate) {
        return Err(CoreError::Config(format!(
            "dropout rate {} outside [0,1)",
            opts.dropout_rate
        )));
    }

    let mut grads = ParamGrads::zeros_like(params);
    let mut total = LossBreakdown {
        rpn: 0.0,
        cls: 0.0,
        loc: 0.0,
    };

    for (img_idx, image) in batch.iter().enumerate() {
        let dropout_seed = opts
            .seed
            .wrapping_add((img_idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let fwd = forward_image(
            params,
            &image.pixels,
            opts.proposal_cap,
            opts.dropout_rate,
            dropout_seed,
        )?;
        let (loss, img_grads) = image_loss_backward(params, &fwd, image, opts)?;
        total.rpn += loss.rpn;
        total.cls += loss.cls;
        total.loc += loss.loc;
        grads.add_assign(&img_grads);
    }

    let inv = 1.0 / batch.len() as f64;
    total.rpn *= inv;
    total.cls *= inv;
    total.loc *= inv;
    grads.scale(inv);

    for (name, value) in [
        ("L_rpn", total.rpn),
        ("L_cls", total.cls),
        ("L_loc", total.loc),
    ] {
        if !value.is_finite() {
            return Err(CoreError::numerical(name, None));
        }
    }
    Ok((total, grads))
}

fn image_loss_backward(
    params: &DetectorParams,
    fwd: &ImageForward,
    image: &AnnotatedImage,
    opts: &LossOptions,
) -> Result<(LossBreakdown, ParamGrads)> {
    let mut grads = ParamGrads::zeros_like(params);
    let gts = &image.boxes;
    let (_, fh, fw) = fwd.rpn_raw.dim();

    // Proposal-module loss over the anchor grid.
    let anchor_labels = assign_anchors(&fwd.anchors, gts);
    let n_labeled = anchor_labels
        .iter()
        .filter(|l| !matches!(l, AnchorLabel::Ignore))
        .count();
    let n_pos_anchors = anchor_labels
        .iter()
        .filter(|l| matches!(l, AnchorLabel::Positive(_)))
        .count();

    let mut rpn_obj = 0.0;
    let mut rpn_box = 0.0;
    let mut d_rpn_raw = Array3::zeros(fwd.rpn_raw.dim());
    for (a, label) in anchor_labels.iter().enumerate() {
        let (i, j) = (a / fw, a % fw);
        debug_assert!(i < fh);
        let logit = fwd.rpn_raw[[0, i, j]];
        match label {
            AnchorLabel::Ignore => {}
            AnchorLabel::Negative => {
                rpn_obj += bce_with_logit(logit, 0.0);
                d_rpn_raw[[0, i, j]] = sigmoid(logit) / n_labeled as f64;
            }
            AnchorLabel::Positive(g) => {
                rpn_obj += bce_with_logit(logit, 1.0);
                d_rpn_raw[[0, i, j]] = (sigmoid(logit) - 1.0) / n_labeled as f64;
                let target = encode_deltas(&gts[*g], &fwd.anchors[a]);
                for k in 0..4 {
                    let diff = fwd.rpn_raw[[1 + k, i, j]] - target[k];
                    rpn_box += smooth_l1(diff);
                    d_rpn_raw[[1 + k, i, j]] = smooth_l1_grad(diff) / n_pos_anchors as f64;
                }
            }
        }
    }
    if n_labeled > 0 {
        rpn_obj /= n_labeled as f64;
    }
    if n_pos_anchors > 0 {
        rpn_box /= n_pos_anchors as f64;
    }
    let l_rpn = rpn_obj + rpn_box;

    // RoI losses over the kept proposals.
    let proposal_boxes: Vec<BBox> = fwd.proposals.iter().map(|p| p.bbox).collect();
    let roi_labels = assign_proposals(&proposal_boxes, gts);
    let n_cls = roi_labels
        .iter()
        .filter(|l| !matches!(l, RoiLabel::Ignore))
        .count();
    let n_pos = roi_labels
        .iter()
        .filter(|l| matches!(l, RoiLabel::Positive(_)))
        .count();

    let probs = softmax_rows(&fwd.class_logits);
    let mut l_cls = 0.0;
    let mut l_loc = 0.0;
    let mut d_logits = Array2::zeros(fwd.class_logits.dim());
    let mut d_deltas = Array2::zeros(fwd.box_deltas.dim());

    for (p, label) in roi_labels.iter().enumerate() {
        let target_row = match label {
            RoiLabel::Ignore => continue,
            RoiLabel::Background => params.background_row(),
            RoiLabel::Positive(g) => params.row_of_class(image.labels[*g]).ok_or_else(|| {
                CoreError::Data(format!(
                    "label {} is not represented in the classifier",
                    image.labels[*g]
                ))
            })?,
        };
        l_cls += -probs[[p, target_row]].max(1e-300).ln();
        for r in 0..probs.ncols() {
            let one = if r == target_row { 1.0 } else { 0.0 };
            d_logits[[p, r]] = (probs[[p, r]] - one) / n_cls as f64;
        }
        if let RoiLabel::Positive(g) = label {
            let target = encode_deltas(&gts[*g], &proposal_boxes[p]);
            for k in 0..4 {
                let diff = fwd.box_deltas[[p, k]] - target[k];
                l_loc += smooth_l1(diff);
                d_deltas[[p, k]] = smooth_l1_grad(diff) / n_pos as f64;
            }
        }
    }
    if n_cls > 0 {
        l_cls /= n_cls as f64;
    }
    if n_pos > 0 {
        l_loc /= n_pos as f64;
    }

    // Backward through the base learner and RoI head.
    let d_emb_cls = classifier_backward(params, &fwd.emb_dropped, &d_logits, &mut grads);
    let d_emb_cls = match &fwd.dropout_mask {
        Some(mask) => &d_emb_cls * mask,
        None => d_emb_cls,
    };
    let (d_emb_reg, d_w_reg, d_b_reg) =
        linear_backward(&d_deltas, &fwd.emb, &params.regressor.weight);
    grads.regressor.0 += &d_w_reg;
    grads.regressor.1 += &d_b_reg;

    let mut d_emb = d_emb_cls + d_emb_reg;
    relu2_backward_inplace(&mut d_emb, &fwd.emb);
    let (mut d_h1, d_w2, d_b2) = linear_backward(&d_emb, &fwd.h1, &params.roi_head[1].weight);
    grads.roi_head[1].0 += &d_w2;
    grads.roi_head[1].1 += &d_b2;
    relu2_backward_inplace(&mut d_h1, &fwd.h1);
    let (d_roi, d_w1, d_b1) = linear_backward(&d_h1, &fwd.roi_flat, &params.roi_head[0].weight);
    grads.roi_head[0].0 += &d_w1;
    grads.roi_head[0].1 += &d_b1;

    let feat = fwd.post.last().expect("backbone output");
    let mut d_feat = Array3::zeros(feat.dim());
    for (p, taps) in fwd.taps.iter().enumerate() {
        roi_align_backward(&d_roi.index_axis(Axis(0), p), taps, &mut d_feat, ROI_POOL);
    }

    // Proposal head backward; optionally sever its path into the backbone.
    let (d_feat_rpn, d_w_rpn, d_b_rpn) =
        conv2d_backward(&d_rpn_raw, &params.proposal.weight, &fwd.rpn_cache, 1, 1, 0);
    grads.proposal.0 += &d_w_rpn;
    grads.proposal.1 += &d_b_rpn;
    if !opts.stop_rpn_feature_grad {
        d_feat += &d_feat_rpn;
    }

    // Backbone backward.
    let mut d = d_feat;
    for k in (0..params.backbone.len()).rev() {
        relu_backward_inplace(&mut d, &fwd.post[k]);
        let block: &ConvBlock = &params.backbone[k];
        let (d_prev, d_w, d_b) = conv2d_backward(
            &d,
            &block.weight,
            &fwd.caches[k],
            block.kernel,
            block.stride,
            block.padding,
        );
        grads.backbone[k].0 += &d_w;
        grads.backbone[k].1 += &d_b;
        d = d_prev;
    }

    Ok((
        LossBreakdown {
            rpn: l_rpn,
            cls: l_cls,
            loc: l_loc,
        },
        grads,
    ))
}

/// Loss components computed from injected outputs and targets, bypassing the
/// network. Used to validate the loss arithmetic against hand-built cases.
#[cfg(test)]
pub(super) fn losses_from_outputs(
    class_logits: &Array2<f64>,
    target_rows: &[Option<usize>],
    box_deltas: &Array2<f64>,
    delta_targets: &[Option<[f64; 4]>],
) -> (f64, f64) {
    let probs = softmax_rows(class_logits);
    let mut l_cls = 0.0;
    let mut n_cls = 0usize;
    for (p, row) in target_rows.iter().enumerate() {
        if let Some(r) = row {
            l_cls += -probs[[p, *r]].max(1e-300).ln();
            n_cls += 1;
        }
    }
    if n_cls > 0 {
        l_cls /= n_cls as f64;
    }
    let mut l_loc = 0.0;
    let mut n_pos = 0usize;
    for (p, target) in delta_targets.iter().enumerate() {
        if let Some(t) = target {
            for k in 0..4 {
                l_loc += smooth_l1(box_deltas[[p, k]] - t[k]);
            }
            n_pos += 1;
        }
    }
    if n_pos > 0 {
        l_loc /= n_pos as f64;
    }
    (l_cls, l_loc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn anchor_assignment_forces_best_anchor_per_gt() {
        // A 16px ground truth never reaches IoU 0.5 with 32px anchors, but
        // its best anchor must still come out positive.
        let anchors = anchor_grid(4, 4, 8.0, 32.0);
        let gts = vec![BBox::new(8.0, 8.0, 24.0, 24.0)];
        let labels = assign_anchors(&anchors, &gts);
        assert!(labels
            .iter()
            .any(|l| matches!(l, AnchorLabel::Positive(0))));
    }

    #[test]
    fn proposal_assignment_thresholds() {
        let gts = vec![BBox::new(0.0, 0.0, 32.0, 32.0)];
        let props = vec![
            BBox::new(0.0, 0.0, 32.0, 32.0),  // IoU 1.0 -> positive
            BBox::new(16.0, 0.0, 48.0, 32.0), // IoU 1/3 -> ignore band
            BBox::new(64.0, 64.0, 96.0, 96.0), // IoU 0 -> background
        ];
        let labels = assign_proposals(&props, &gts);
        assert_eq!(labels[0], RoiLabel::Positive(0));
        assert_eq!(labels[1], RoiLabel::Ignore);
        assert_eq!(labels[2], RoiLabel::Background);
    }

    #[test]
    fn injected_matching_outputs_reach_zero_loss() {
        // Targets hit exactly: the classification margin is huge and the
        // deltas match bit for bit.
        let logits = array![[40.0, 0.0, 0.0], [0.0, 40.0, 0.0]];
        let rows = vec![Some(0), Some(1)];
        let deltas = array![[0.1, -0.2, 0.3, 0.0], [0.0, 0.0, 0.0, 0.0]];
        let targets = vec![
            Some([0.1, -0.2, 0.3, 0.0]),
            Some([0.0, 0.0, 0.0, 0.0]),
        ];
        let (l_cls, l_loc) = losses_from_outputs(&logits, &rows, &deltas, &targets);
        assert!(l_cls <= 1e-6, "l_cls = {l_cls}");
        assert_eq!(l_loc, 0.0);
    }

    #[test]
    fn no_positive_targets_means_zero_loc() {
        let logits = array![[0.0, 0.0, 4.0]];
        let (_, l_loc) = losses_from_outputs(
            &logits,
            &[Some(2)],
            &array![[9.0, 9.0, 9.0, 9.0]],
            &[None],
        );
        assert_eq!(l_loc, 0.0);
    }
}

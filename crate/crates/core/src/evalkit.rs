//! Detection metrics: per-class average precision at an IoU threshold,
//! base/novel aggregation (bAP/nAP) and proposal average recall with
//! size buckets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::synthgen::{AnnotatedImage, BBox, ClassId};

/// Which classes count toward bAP and which toward nAP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base_ids: BTreeSet<ClassId>,
    pub novel_ids: BTreeSet<ClassId>,
}

impl ClassSplit {
    pub fn new(base_ids: BTreeSet<ClassId>, novel_ids: BTreeSet<ClassId>) -> Self {
        Self { base_ids, novel_ids }
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.base_ids.contains(&id) || self.novel_ids.contains(&id)
    }

    pub fn all_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.base_ids.iter().chain(self.novel_ids.iter()).copied()
    }
}

/// One scored detection, tied to the ground-truth image it was produced for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub bbox: BBox,
    pub score: f64,
    pub class_id: ClassId,
}

/// Size buckets for recall, keyed by ground-truth box area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    All,
    Small,
    Medium,
    Large,
}

impl std::fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SizeBucket::All => "all",
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        };
        f.write_str(s)
    }
}

/// Area thresholds separating the buckets. Defaults rescale the usual
/// 32^2 / 96^2 cutoffs to a 128x128 canvas.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small_max_area: f64,
    pub medium_max_area: f64,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        Self {
            small_max_area: 24.0 * 24.0,
            medium_max_area: 40.0 * 40.0,
        }
    }
}

impl SizeBuckets {
    pub fn bucket_of(&self, area: f64) -> SizeBucket {
        if area < self.small_max_area {
            SizeBucket::Small
        } else if area < self.medium_max_area {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// Aggregated metric report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_ap: BTreeMap<ClassId, f64>,
    #[serde(rename = "bAP")]
    pub b_ap: f64,
    #[serde(rename = "nAP")]
    pub n_ap: f64,
    /// Average recall keyed by "topN:bucket".
    pub ar: BTreeMap<String, f64>,
}

/// Intersection over union of two boxes. Degenerate (zero-area) boxes have
/// IoU 0 with anything.
pub fn match_iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let inter = iw * ih;
    inter / (area_a + area_b - inter)
}

/// Deterministic detection ordering: score descending, then image id, then
/// box lexicographic. Equal-score ties are broken the same way regardless of
/// the input order.
fn detection_order(a: &DetectionRecord, b: &DetectionRecord) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.bbox.x0.total_cmp(&b.bbox.x0))
        .then(a.bbox.y0.total_cmp(&b.bbox.y0))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// AP from a TP/FP sequence ordered by descending score, via all-point
/// precision-recall interpolation (area under the precision envelope).
fn ap_from_matches(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(is_tp.len()); // (recall, precision)
    let mut tp = 0usize;
    for (i, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / num_gt as f64;
        points.push((recall, precision));
    }
    // Precision envelope: max precision at recall >= r.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let env = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            ap += (r - prev_recall) * env;
            prev_recall = r;
        }
        i += 1;
    }
    ap
}

/// Per-class AP at a single IoU threshold with greedy score-ordered matching
/// (one detection per ground truth), plus unweighted bAP/nAP means over the
/// split. Classes without any ground-truth instance are skipped in the means.
pub fn compute_ap(
    detections: &[DetectionRecord],
    ground_truth: &[AnnotatedImage],
    iou_threshold: f64,
    split: &ClassSplit,
) -> Result<MetricReport> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(CoreError::Config(format!(
            "iou_threshold must lie in (0,1), got {iou_threshold}"
        )));
    }
    for det in detections {
        if !split.contains(det.class_id) {
            return Err(CoreError::Data(format!(
                "detection names unknown class id {}",
                det.class_id
            )));
        }
        if det.image_id >= ground_truth.len() {
            return Err(CoreError::Data(format!(
                "detection references image {} but only {} ground-truth images given",
                det.image_id,
                ground_truth.len()
            )));
        }
    }

    let mut per_class_ap = BTreeMap::new();
    for class_id in split.all_ids() {
        // Ground truths of this class, grouped by image.
        let mut gt_boxes: BTreeMap<usize, Vec<&BBox>> = BTreeMap::new();
        let mut num_gt = 0usize;
        for (img_id, img) in ground_truth.iter().enumerate() {
            for (bbox, &label) in img.boxes.iter().zip(&img.labels) {
                if label == class_id {
                    gt_boxes.entry(img_id).or_default().push(bbox);
                    num_gt += 1;
                }
            }
        }
        if num_gt == 0 {
            continue;
        }

        let mut dets: Vec<&DetectionRecord> = detections
            .iter()
            .filter(|d| d.class_id == class_id)
            .collect();
        dets.sort_by(|a, b| detection_order(a, b));

        let mut matched: BTreeMap<usize, Vec<bool>> = gt_boxes
            .iter()
            .map(|(&img, boxes)| (img, vec![false; boxes.len()]))
            .collect();
        let mut is_tp = Vec::with_capacity(dets.len());
        for det in &dets {
            let mut best: Option<(usize, f64)> = None;
            if let Some(boxes) = gt_boxes.get(&det.image_id) {
                let taken = &matched[&det.image_id];
                for (gi, gt) in boxes.iter().enumerate() {
                    if taken[gi] {
                        continue;
                    }
                    let iou = match_iou(&det.bbox, gt);
                    if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
            }
            match best {
                Some((gi, _)) => {
                    matched.get_mut(&det.image_id).unwrap()[gi] = true;
                    is_tp.push(true);
                }
                None => is_tp.push(false),
            }
        }
        per_class_ap.insert(class_id, ap_from_matches(&is_tp, num_gt));
    }

    let mean_over = |ids: &BTreeSet<ClassId>| -> f64 {
        let vals: Vec<f64> = ids
            .iter()
            .filter_map(|id| per_class_ap.get(id).copied())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };

    Ok(MetricReport {
        b_ap: mean_over(&split.base_ids),
        n_ap: mean_over(&split.novel_ids),
        per_class_ap,
        ar: BTreeMap::new(),
    })
}

/// Mean AP over the 10 COCO-style thresholds 0.5:0.05:0.95.
pub fn compute_ap_range(
    detections: &[DetectionRecord],
    ground_truth: &[AnnotatedImage],
    split: &ClassSplit,
) -> Result<(f64, f64)> {
    let mut b_sum = 0.0;
    let mut n_sum = 0.0;
    for i in 0..10 {
        let thr = 0.5 + 0.05 * i as f64;
        let rep = compute_ap(detections, ground_truth, thr, split)?;
        b_sum += rep.b_ap;
        n_sum += rep.n_ap;
    }
    Ok((b_sum / 10.0, n_sum / 10.0))
}

/// Class-agnostic proposal recall: fraction of ground truths matched by one
/// of each image's topN proposals (by objectness score) at the IoU
/// threshold, bucketed by ground-truth area.
pub fn proposal_recall(
    proposals: &BTreeMap<usize, Vec<(BBox, f64)>>,
    ground_truth: &[AnnotatedImage],
    iou_threshold: f64,
    top_n: usize,
    buckets: &SizeBuckets,
) -> Result<BTreeMap<SizeBucket, f64>> {
    if top_n < 1 {
        return Err(CoreError::Config("topN must be >= 1".into()));
    }
    let mut total: BTreeMap<SizeBucket, usize> = BTreeMap::new();
    let mut hit: BTreeMap<SizeBucket, usize> = BTreeMap::new();

    for (img_id, img) in ground_truth.iter().enumerate() {
        let mut props: Vec<(BBox, f64)> = proposals.get(&img_id).cloned().unwrap_or_default();
        props.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(a.0.x0.total_cmp(&b.0.x0))
                .then(a.0.y0.total_cmp(&b.0.y0))
        });
        props.truncate(top_n);

        let mut gt_matched = vec![false; img.boxes.len()];
        // Greedy over proposals in score order: each proposal claims the
        // unmatched ground truth it overlaps best.
        for (pbox, _) in &props {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in img.boxes.iter().enumerate() {
                if gt_matched[gi] {
                    continue;
                }
                let iou = match_iou(pbox, gt);
                if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                gt_matched[gi] = true;
            }
        }

        for (gi, gt) in img.boxes.iter().enumerate() {
            let bucket = buckets.bucket_of(gt.area());
            for b in [SizeBucket::All, bucket] {
                *total.entry(b).or_insert(0) += 1;
                if gt_matched[gi] {
                    *hit.entry(b).or_insert(0) += 1;
                }
            }
        }
    }

    Ok(total
        .into_iter()
        .map(|(b, n)| (b, hit.get(&b).copied().unwrap_or(0) as f64 / n as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::AnnotatedImage;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox { x0, y0, x1, y1 }
    }

    fn image_with(boxes: Vec<BBox>, labels: Vec<ClassId>) -> AnnotatedImage {
        AnnotatedImage {
            pixels: Array3::zeros((3, 4, 4)),
            boxes,
            labels,
        }
    }

    fn split_01() -> ClassSplit {
        ClassSplit::new([0].into(), [1].into())
    }

    #[test]
    fn iou_identical_boxes() {
        let a = bbox(1.0, 2.0, 5.0, 7.0);
        assert_eq!(match_iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        assert_eq!(
            match_iou(&bbox(0.0, 0.0, 1.0, 1.0), &bbox(2.0, 2.0, 3.0, 3.0)),
            0.0
        );
    }

    #[test]
    fn iou_unit_squares_offset_by_half() {
        // Overlap 0.5, union 1.5.
        let v = match_iou(&bbox(0.0, 0.0, 1.0, 1.0), &bbox(0.5, 0.0, 1.5, 1.0));
        assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_degenerate_box_is_zero() {
        assert_eq!(
            match_iou(&bbox(1.0, 1.0, 1.0, 3.0), &bbox(0.0, 0.0, 2.0, 2.0)),
            0.0
        );
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        let a = bbox(0.0, 0.0, 3.0, 2.0);
        let b = bbox(1.0, 1.0, 4.0, 5.0);
        assert_eq!(match_iou(&a, &b), match_iou(&b, &a));
        let v = match_iou(&a, &b);
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn ap_perfect_detections() {
        let gt = vec![
            image_with(vec![bbox(0.0, 0.0, 10.0, 10.0)], vec![0]),
            image_with(vec![bbox(5.0, 5.0, 20.0, 20.0)], vec![1]),
        ];
        let dets = vec![
            DetectionRecord {
                image_id: 0,
                bbox: bbox(0.0, 0.0, 10.0, 10.0),
                score: 1.0,
                class_id: 0,
            },
            DetectionRecord {
                image_id: 1,
                bbox: bbox(5.0, 5.0, 20.0, 20.0),
                score: 1.0,
                class_id: 1,
            },
        ];
        let rep = compute_ap(&dets, &gt, 0.5, &split_01()).unwrap();
        assert_eq!(rep.per_class_ap[&0], 1.0);
        assert_eq!(rep.per_class_ap[&1], 1.0);
        assert_eq!(rep.b_ap, 1.0);
        assert_eq!(rep.n_ap, 1.0);
    }

    #[test]
    fn ap_zero_detections() {
        let gt = vec![image_with(vec![bbox(0.0, 0.0, 10.0, 10.0)], vec![0])];
        let rep = compute_ap(&[], &gt, 0.5, &split_01()).unwrap();
        assert_eq!(rep.per_class_ap[&0], 0.0);
        assert_eq!(rep.b_ap, 0.0);
    }

    #[test]
    fn ap_hand_computed_staircase() {
        // One class, two ground truths, detections ordered by score:
        // hit(0.9), miss(0.8), hit(0.7). Expected 0.5*1.0 + 0.5*(2/3).
        let gt = vec![image_with(
            vec![bbox(0.0, 0.0, 10.0, 10.0), bbox(20.0, 20.0, 30.0, 30.0)],
            vec![0, 0],
        )];
        let dets = vec![
            DetectionRecord {
                image_id: 0,
                bbox: bbox(0.0, 0.0, 10.0, 10.0),
                score: 0.9,
                class_id: 0,
            },
            DetectionRecord {
                image_id: 0,
                bbox: bbox(50.0, 50.0, 60.0, 60.0),
                score: 0.8,
                class_id: 0,
            },
            DetectionRecord {
                image_id: 0,
                bbox: bbox(20.0, 20.0, 30.0, 30.0),
                score: 0.7,
                class_id: 0,
            },
        ];
        let rep = compute_ap(&dets, &gt, 0.5, &split_01()).unwrap();
        assert_abs_diff_eq!(rep.per_class_ap[&0], 0.5 + 0.5 * (2.0 / 3.0), epsilon = 1e-12);
    }

    #[test]
    fn ap_unknown_class_rejected() {
        let gt = vec![image_with(vec![bbox(0.0, 0.0, 10.0, 10.0)], vec![0])];
        let dets = vec![DetectionRecord {
            image_id: 0,
            bbox: bbox(0.0, 0.0, 10.0, 10.0),
            score: 1.0,
            class_id: 7,
        }];
        assert!(matches!(
            compute_ap(&dets, &gt, 0.5, &split_01()),
            Err(CoreError::Data(_))
        ));
    }

    #[test]
    fn ap_monotone_under_added_top_hit() {
        // Adding a correct detection scored above all existing never
        // decreases AP.
        let gt = vec![image_with(
            vec![bbox(0.0, 0.0, 10.0, 10.0), bbox(20.0, 20.0, 30.0, 30.0)],
            vec![0, 0],
        )];
        let mut dets = vec![
            DetectionRecord {
                image_id: 0,
                bbox: bbox(40.0, 40.0, 50.0, 50.0),
                score: 0.6,
                class_id: 0,
            },
            DetectionRecord {
                image_id: 0,
                bbox: bbox(0.0, 0.0, 10.0, 10.0),
                score: 0.5,
                class_id: 0,
            },
        ];
        let before = compute_ap(&dets, &gt, 0.5, &split_01()).unwrap().per_class_ap[&0];
        dets.push(DetectionRecord {
            image_id: 0,
            bbox: bbox(20.0, 20.0, 30.0, 30.0),
            score: 0.95,
            class_id: 0,
        });
        let after = compute_ap(&dets, &gt, 0.5, &split_01()).unwrap().per_class_ap[&0];
        assert!(after >= before);
    }

    #[test]
    fn ap_equal_scores_are_order_invariant() {
        let gt = vec![image_with(
            vec![bbox(0.0, 0.0, 10.0, 10.0), bbox(20.0, 20.0, 30.0, 30.0)],
            vec![0, 0],
        )];
        let d1 = DetectionRecord {
            image_id: 0,
            bbox: bbox(0.0, 0.0, 10.0, 10.0),
            score: 0.5,
            class_id: 0,
        };
        let d2 = DetectionRecord {
            image_id: 0,
            bbox: bbox(21.0, 20.0, 31.0, 30.0),
            score: 0.5,
            class_id: 0,
        };
        let a = compute_ap(&[d1.clone(), d2.clone()], &gt, 0.5, &split_01()).unwrap();
        let b = compute_ap(&[d2, d1], &gt, 0.5, &split_01()).unwrap();
        assert_eq!(a.per_class_ap[&0], b.per_class_ap[&0]);
    }

    #[test]
    fn recall_perfect_proposals() {
        let gt = vec![image_with(
            vec![bbox(0.0, 0.0, 20.0, 20.0), bbox(40.0, 40.0, 90.0, 90.0)],
            vec![0, 1],
        )];
        let proposals: BTreeMap<usize, Vec<(BBox, f64)>> = [(
            0usize,
            vec![
                (bbox(0.0, 0.0, 20.0, 20.0), 0.9),
                (bbox(40.0, 40.0, 90.0, 90.0), 0.8),
            ],
        )]
        .into();
        let rec = proposal_recall(&proposals, &gt, 0.5, 100, &SizeBuckets::default()).unwrap();
        for (_, v) in rec {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn recall_no_proposal_reaches_threshold() {
        let gt = vec![image_with(vec![bbox(0.0, 0.0, 20.0, 20.0)], vec![0])];
        let proposals: BTreeMap<usize, Vec<(BBox, f64)>> =
            [(0usize, vec![(bbox(60.0, 60.0, 80.0, 80.0), 0.9)])].into();
        let rec = proposal_recall(&proposals, &gt, 0.5, 100, &SizeBuckets::default()).unwrap();
        assert_eq!(rec[&SizeBucket::All], 0.0);
    }

    #[test]
    fn recall_half_matched_matches_exhaustive_tiny_oracle() {
        // 4 ground truths, proposals cover exactly 2; brute-force maximum
        // matching over this instance gives the same 0.5.
        let gt = vec![image_with(
            vec![
                bbox(0.0, 0.0, 20.0, 20.0),
                bbox(30.0, 30.0, 50.0, 50.0),
                bbox(60.0, 60.0, 80.0, 80.0),
                bbox(90.0, 90.0, 110.0, 110.0),
            ],
            vec![0, 0, 1, 1],
        )];
        let props = vec![
            (bbox(0.0, 0.0, 20.0, 20.0), 0.9),
            (bbox(30.0, 30.0, 50.0, 50.0), 0.8),
            (bbox(5.0, 90.0, 25.0, 110.0), 0.7), // overlaps nothing
        ];
        let proposals: BTreeMap<usize, Vec<(BBox, f64)>> = [(0usize, props.clone())].into();
        let rec = proposal_recall(&proposals, &gt, 0.5, 100, &SizeBuckets::default()).unwrap();
        assert_eq!(rec[&SizeBucket::All], 0.5);

        // Exhaustive matcher: try every assignment of proposals to ground
        // truths and count the maximum number matched at the threshold.
        let gts = &gt[0].boxes;
        let mut best = 0usize;
        let n = props.len();
        let perms = [
            [0usize, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for perm in perms {
            let mut used = vec![false; gts.len()];
            let mut count = 0;
            for &pi in perm.iter().take(n) {
                for (gi, g) in gts.iter().enumerate() {
                    if !used[gi] && match_iou(&props[pi].0, g) >= 0.5 {
                        used[gi] = true;
                        count += 1;
                        break;
                    }
                }
            }
            best = best.max(count);
        }
        assert_eq!(best as f64 / gts.len() as f64, 0.5);
    }

    #[test]
    fn recall_respects_top_n() {
        let gt = vec![image_with(vec![bbox(0.0, 0.0, 20.0, 20.0)], vec![0])];
        // The matching proposal is ranked second; topN=1 must miss it.
        let proposals: BTreeMap<usize, Vec<(BBox, f64)>> = [(
            0usize,
            vec![
                (bbox(60.0, 60.0, 80.0, 80.0), 0.9),
                (bbox(0.0, 0.0, 20.0, 20.0), 0.5),
            ],
        )]
        .into();
        let rec = proposal_recall(&proposals, &gt, 0.5, 1, &SizeBuckets::default()).unwrap();
        assert_eq!(rec[&SizeBucket::All], 0.0);
        let rec2 = proposal_recall(&proposals, &gt, 0.5, 2, &SizeBuckets::default()).unwrap();
        assert_eq!(rec2[&SizeBucket::All], 1.0);
    }

    #[test]
    fn bucket_assignment_uses_area_cutoffs() {
        let b = SizeBuckets::default();
        assert_eq!(b.bucket_of(20.0 * 20.0), SizeBucket::Small);
        assert_eq!(b.bucket_of(30.0 * 30.0), SizeBucket::Medium);
        assert_eq!(b.bucket_of(50.0 * 50.0), SizeBucket::Large);
    }
}

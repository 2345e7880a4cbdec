//! Precision/recall/AP computation, mAP@50 and mAP@50-95 aggregation, and
//! per-class table emission.
//!
//! Matching is class-aware and greedy per image: detections are visited in
//! descending confidence and take the highest-IoU unmatched ground truth at
//! or above the threshold. AP uses 101-point interpolation; mAP@50-95
//! averages ten thresholds 0.50:0.05:0.95. Classes without ground-truth
//! instances are excluded from the mean rather than scored zero.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, PixelBox};

/// The ten COCO-style IoU thresholds.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// A detection or ground-truth box attached to an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBox {
    pub image_id: String,
    pub bbox: PixelBox,
}

impl ImageBox {
    pub fn new(image_id: impl Into<String>, bbox: PixelBox) -> Self {
        ImageBox {
            image_id: image_id.into(),
            bbox,
        }
    }
}

/// Outcome of one detection after matching at a fixed IoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRecord {
    pub confidence: f64,
    pub matched: bool,
    pub class_id: usize,
    pub image_id: String,
}

/// Deterministic evaluation order: descending confidence, then image id,
/// then coordinates. Input order never matters for distinct boxes.
fn sort_for_eval(dets: &[ImageBox]) -> Vec<&ImageBox> {
    let mut refs: Vec<&ImageBox> = dets.iter().collect();
    refs.sort_by(|a, b| {
        b.bbox
            .confidence
            .partial_cmp(&a.bbox.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| {
                a.bbox
                    .x1
                    .partial_cmp(&b.bbox.x1)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| {
                a.bbox
                    .y1
                    .partial_cmp(&b.bbox.y1)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| {
                a.bbox
                    .x2
                    .partial_cmp(&b.bbox.x2)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| {
                a.bbox
                    .y2
                    .partial_cmp(&b.bbox.y2)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    refs
}

/// Greedy matching of one class's detections against ground truth at one
/// IoU threshold. Each ground-truth box is matched at most once.
pub fn match_detections(dets: &[ImageBox], gts: &[ImageBox], iou_thr: f64) -> Vec<MatchRecord> {
    let order = sort_for_eval(dets);
    // gt boxes grouped per image with used flags
    let mut gt_by_image: HashMap<&str, Vec<(usize, &ImageBox)>> = HashMap::new();
    for (i, gt) in gts.iter().enumerate() {
        gt_by_image
            .entry(gt.image_id.as_str())
            .or_default()
            .push((i, gt));
    }
    let mut used = vec![false; gts.len()];
    let mut records = Vec::with_capacity(dets.len());
    for det in order {
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_image.get(det.image_id.as_str()) {
            for &(gi, gt) in cands {
                if used[gi] || gt.bbox.class_id != det.bbox.class_id {
                    continue;
                }
                let overlap = iou(&det.bbox, &gt.bbox);
                if overlap >= iou_thr && best.map(|(_, b)| overlap > b).unwrap_or(true) {
                    best = Some((gi, overlap));
                }
            }
        }
        let matched = if let Some((gi, _)) = best {
            used[gi] = true;
            true
        } else {
            false
        };
        records.push(MatchRecord {
            confidence: det.bbox.confidence,
            matched,
            class_id: det.bbox.class_id,
            image_id: det.image_id.clone(),
        });
    }
    records
}

/// 101-point interpolated average precision. `records` must be in
/// evaluation order (as produced by [`match_detections`]).
pub fn average_precision(records: &[MatchRecord], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    if records.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precisions = Vec::with_capacity(records.len());
    let mut recalls = Vec::with_capacity(records.len());
    for r in records {
        if r.matched {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope from the right
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        // first PR point with recall >= r
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map(|i| envelope[i])
            .unwrap_or(0.0);
        total += p;
    }
    total / 101.0
}

/// Per-class metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub instances: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

/// Aggregated evaluation over every class with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Evaluate detections against ground truth over the given IoU thresholds
/// (defaults to the ten COCO thresholds when `thresholds` is `None`).
///
/// Precision and recall per class are computed from the IoU@0.5 matching
/// over all supplied detections; the aggregate row averages class P/R.
pub fn map_range(
    dets: &[ImageBox],
    gts: &[ImageBox],
    thresholds: Option<&[f64]>,
) -> Result<EvalSummary> {
    let default_thr = map_thresholds();
    let thresholds = thresholds.unwrap_or(&default_thr);
    if thresholds.is_empty()
        || thresholds.windows(2).any(|w| w[0] >= w[1])
        || thresholds.iter().any(|t| !(0.5..=0.95).contains(t))
    {
        return Err(Error::Config(
            "thresholds must be strictly increasing within [0.5, 0.95]".into(),
        ));
    }

    let mut class_ids: Vec<usize> = gts.iter().map(|g| g.bbox.class_id).collect();
    class_ids.sort_unstable();
    class_ids.dedup();

    let mut per_class = Vec::with_capacity(class_ids.len());
    for &cid in &class_ids {
        let class_dets: Vec<ImageBox> = dets
            .iter()
            .filter(|d| d.bbox.class_id == cid)
            .cloned()
            .collect();
        let class_gts: Vec<ImageBox> = gts
            .iter()
            .filter(|g| g.bbox.class_id == cid)
            .cloned()
            .collect();
        let n_gt = class_gts.len();

        let mut ap_sum = 0.0;
        let mut ap50 = 0.0;
        for (ti, &thr) in thresholds.iter().enumerate() {
            let records = match_detections(&class_dets, &class_gts, thr);
            let ap = average_precision(&records, n_gt);
            if ti == 0 {
                ap50 = ap;
            }
            ap_sum += ap;
        }
        // P and R are reported at the max-F1 point of the IoU@0.5 PR curve,
        // so they are meaningful even though evaluation keeps detections far
        // below any deployment confidence threshold.
        let records50 = match_detections(&class_dets, &class_gts, 0.5);
        let (mut precision, mut recall) = (0.0, 0.0);
        let mut best_f1 = -1.0;
        let mut tp = 0usize;
        for (k, r) in records50.iter().enumerate() {
            if r.matched {
                tp += 1;
            }
            let p = tp as f64 / (k + 1) as f64;
            let rec = if n_gt == 0 {
                0.0
            } else {
                tp as f64 / n_gt as f64
            };
            let f1 = if p + rec > 0.0 {
                2.0 * p * rec / (p + rec)
            } else {
                0.0
            };
            if f1 > best_f1 {
                best_f1 = f1;
                precision = p;
                recall = rec;
            }
        }

        per_class.push(ClassMetrics {
            class_id: cid,
            instances: n_gt,
            precision,
            recall,
            ap50,
            ap50_95: ap_sum / thresholds.len() as f64,
        });
    }

    let n = per_class.len().max(1) as f64;
    Ok(EvalSummary {
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / n,
        map50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        map50_95: per_class.iter().map(|c| c.ap50_95).sum::<f64>() / n,
        per_class,
    })
}

/// One emitted table row; the aggregate row uses class name "all".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub class: String,
    pub instances: usize,
    pub p: f64,
    pub r: f64,
    pub map50: f64,
    pub map50_95: f64,
}

/// Rows shaped like the reference tables: "all" first, then classes sorted
/// by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn from_summary(summary: &EvalSummary, class_names: &[String]) -> Self {
        let mut rows = vec![MetricsRow {
            class: "all".into(),
            instances: summary.per_class.iter().map(|c| c.instances).sum(),
            p: summary.precision,
            r: summary.recall,
            map50: summary.map50,
            map50_95: summary.map50_95,
        }];
        let mut class_rows: Vec<MetricsRow> = summary
            .per_class
            .iter()
            .map(|c| MetricsRow {
                class: class_names
                    .get(c.class_id)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{}", c.class_id)),
                instances: c.instances,
                p: c.precision,
                r: c.recall,
                map50: c.ap50,
                map50_95: c.ap50_95,
            })
            .collect();
        class_rows.sort_by(|a, b| a.class.cmp(&b.class));
        rows.extend(class_rows);
        MetricsTable { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("Class,Instances,P,R,mAP50,mAP50-95\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.3},{:.3},{:.3},{:.3}\n",
                row.class, row.instances, row.p, row.r, row.map50, row.map50_95
            ));
        }
        out
    }

    pub fn to_aligned_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.class.len())
            .chain(["Class".len()])
            .max()
            .unwrap_or(5);
        let mut out = format!(
            "{:<name_w$}  {:>9}  {:>6}  {:>6}  {:>6}  {:>8}\n",
            "Class", "Instances", "P", "R", "mAP50", "mAP50-95"
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:>9}  {:>6.3}  {:>6.3}  {:>6.3}  {:>8.3}\n",
                row.class, row.instances, row.p, row.r, row.map50, row.map50_95
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Prediction interchange line: `image_id class_id conf x1 y1 x2 y2`.
pub fn format_prediction_line(d: &ImageBox) -> String {
    format!(
        "{} {} {:.6} {:.3} {:.3} {:.3} {:.3}",
        d.image_id, d.bbox.class_id, d.bbox.confidence, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
    )
}

pub fn parse_predictions(text: &str, source: &str) -> Result<Vec<ImageBox>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::parse(
                source,
                lineno + 1,
                format!("expected 7 fields, got {}", fields.len()),
            ));
        }
        let class_id: usize = fields[1].parse().map_err(|_| {
            Error::parse(source, lineno + 1, format!("bad class id '{}'", fields[1]))
        })?;
        let mut nums = [0.0f64; 5];
        for (v, f) in nums.iter_mut().zip(&fields[2..]) {
            *v = f
                .parse()
                .map_err(|_| Error::parse(source, lineno + 1, format!("bad number '{f}'")))?;
        }
        out.push(ImageBox::new(
            fields[0],
            PixelBox::new(nums[1], nums[2], nums[3], nums[4], class_id, nums[0]),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn det(image: &str, class: usize, conf: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> ImageBox {
        ImageBox::new(image, PixelBox::new(x1, y1, x2, y2, class, conf))
    }

    fn gt(image: &str, class: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> ImageBox {
        det(image, class, 1.0, x1, y1, x2, y2)
    }

    // ---- independent brute-force oracle ------------------------------
    // Written first, with its own sorting, matching, and AP integration,
    // sharing nothing with the implementation above.

    fn oracle_sorted(dets: &[ImageBox]) -> Vec<ImageBox> {
        let mut v = dets.to_vec();
        for i in 1..v.len() {
            let mut j = i;
            while j > 0 && oracle_before(&v[j], &v[j - 1]) {
                v.swap(j, j - 1);
                j -= 1;
            }
        }
        v
    }

    fn oracle_before(a: &ImageBox, b: &ImageBox) -> bool {
        if a.bbox.confidence != b.bbox.confidence {
            return a.bbox.confidence > b.bbox.confidence;
        }
        if a.image_id != b.image_id {
            return a.image_id < b.image_id;
        }
        for (x, y) in [
            (a.bbox.x1, b.bbox.x1),
            (a.bbox.y1, b.bbox.y1),
            (a.bbox.x2, b.bbox.x2),
            (a.bbox.y2, b.bbox.y2),
        ] {
            if x != y {
                return x < y;
            }
        }
        false
    }

    fn oracle_iou(a: &PixelBox, b: &PixelBox) -> f64 {
        let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
        let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
        let inter = w * h;
        let area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
        let area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
        let union = area_a + area_b - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// true/false per sorted detection.
    fn oracle_match(dets: &[ImageBox], gts: &[ImageBox], thr: f64) -> Vec<bool> {
        let sorted = oracle_sorted(dets);
        let mut taken = vec![false; gts.len()];
        let mut flags = Vec::new();
        for d in &sorted {
            let mut best_gt = usize::MAX;
            let mut best_iou = -1.0;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.image_id != d.image_id || g.bbox.class_id != d.bbox.class_id {
                    continue;
                }
                let o = oracle_iou(&d.bbox, &g.bbox);
                if o >= thr && o > best_iou {
                    best_iou = o;
                    best_gt = gi;
                }
            }
            if best_gt != usize::MAX {
                taken[best_gt] = true;
                flags.push(true);
            } else {
                flags.push(false);
            }
        }
        flags
    }

    fn oracle_ap(flags: &[bool], n_gt: usize) -> f64 {
        if n_gt == 0 || flags.is_empty() {
            return 0.0;
        }
        let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
        let mut tp = 0.0;
        for (i, &m) in flags.iter().enumerate() {
            if m {
                tp += 1.0;
            }
            points.push((tp / n_gt as f64, tp / (i + 1) as f64));
        }
        let mut acc = 0.0;
        for k in 0..=100usize {
            let r = k as f64 / 100.0;
            let mut best = 0.0;
            for &(rec, prec) in &points {
                if rec >= r - 1e-12 {
                    // envelope: max precision among points at recall >= r
                    let mut p = prec;
                    for &(rec2, prec2) in &points {
                        if rec2 >= rec - 1e-12 && prec2 > p {
                            p = prec2;
                        }
                    }
                    if p > best {
                        best = p;
                    }
                }
            }
            acc += best;
        }
        acc / 101.0
    }

    fn oracle_map(dets: &[ImageBox], gts: &[ImageBox]) -> (f64, f64) {
        let mut classes: Vec<usize> = gts.iter().map(|g| g.bbox.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut sum50 = 0.0;
        let mut sum_range = 0.0;
        for &cid in &classes {
            let cd: Vec<ImageBox> = dets
                .iter()
                .filter(|d| d.bbox.class_id == cid)
                .cloned()
                .collect();
            let cg: Vec<ImageBox> = gts
                .iter()
                .filter(|g| g.bbox.class_id == cid)
                .cloned()
                .collect();
            let mut aps = Vec::new();
            for ti in 0..10 {
                let thr = 0.5 + ti as f64 * 0.05;
                let flags = oracle_match(&cd, &cg, thr);
                aps.push(oracle_ap(&flags, cg.len()));
            }
            sum50 += aps[0];
            sum_range += aps.iter().sum::<f64>() / 10.0;
        }
        let n = classes.len().max(1) as f64;
        (sum50 / n, sum_range / n)
    }

    // ---- hand-checked cases --------------------------------------------

    #[test]
    fn exact_match_at_any_threshold() {
        let d = vec![det("img0", 0, 0.9, 10.0, 10.0, 20.0, 20.0)];
        let g = vec![gt("img0", 0, 10.0, 10.0, 20.0, 20.0)];
        for thr in [0.5, 0.75, 0.95, 1.0] {
            let records = match_detections(&d, &g, thr);
            assert!(records[0].matched, "thr {thr}");
        }
    }

    #[test]
    fn second_detection_on_same_gt_is_unmatched() {
        let d = vec![
            det("img0", 0, 0.9, 10.0, 10.0, 20.0, 20.0),
            det("img0", 0, 0.7, 10.5, 10.0, 20.5, 20.0),
        ];
        let g = vec![gt("img0", 0, 10.0, 10.0, 20.0, 20.0)];
        let records = match_detections(&d, &g, 0.5);
        assert!(records[0].matched);
        assert!(!records[1].matched);
        assert_eq!(records[0].confidence, 0.9);
    }

    #[test]
    fn matching_equals_oracle_on_random_scenes() {
        let mut rng = Rng::seed_from(50);
        for round in 0..100 {
            let (dets, gts) = random_scene(&mut rng, 5);
            for thr in [0.5, 0.7] {
                let got: Vec<bool> = match_detections(&dets, &gts, thr)
                    .iter()
                    .map(|r| r.matched)
                    .collect();
                let want = oracle_match(&dets, &gts, thr);
                assert_eq!(got, want, "round {round} thr {thr}");
            }
        }
    }

    #[test]
    fn ap_single_det_cases() {
        let g = vec![gt("a", 0, 0.0, 0.0, 10.0, 10.0)];
        let hit = match_detections(&[det("a", 0, 0.8, 0.0, 0.0, 10.0, 10.0)], &g, 0.5);
        assert_eq!(average_precision(&hit, 1), 1.0);
        let miss = match_detections(&[det("a", 0, 0.8, 50.0, 50.0, 60.0, 60.0)], &g, 0.5);
        assert_eq!(average_precision(&miss, 1), 0.0);
    }

    #[test]
    fn ap_half_recall_hand_case() {
        // two gts, one matching det: precision 1 up to recall 0.5, 0 beyond
        let g = vec![
            gt("a", 0, 0.0, 0.0, 10.0, 10.0),
            gt("a", 0, 30.0, 30.0, 40.0, 40.0),
        ];
        let records = match_detections(&[det("a", 0, 0.9, 0.0, 0.0, 10.0, 10.0)], &g, 0.5);
        let ap = average_precision(&records, 2);
        let hand = 51.0 / 101.0; // 101-point evaluation by hand
        assert!((ap - hand).abs() < 1e-12);
        assert!((ap - 0.5).abs() < 0.01);
    }

    #[test]
    fn perfect_detections_score_one() {
        let mut rng = Rng::seed_from(51);
        let (_, gts) = random_scene(&mut rng, 4);
        let dets: Vec<ImageBox> = gts
            .iter()
            .map(|g| {
                let mut d = g.clone();
                d.bbox.confidence = 0.95;
                d
            })
            .collect();
        let s = map_range(&dets, &gts, None).unwrap();
        assert_eq!(s.map50, 1.0);
        assert_eq!(s.map50_95, 1.0);
    }

    #[test]
    fn threshold_list_has_ten_entries() {
        assert_eq!(map_thresholds().len(), 10);
        assert_eq!(map_thresholds()[0], 0.5);
        assert!((map_thresholds()[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn bad_threshold_lists_rejected() {
        let dets: Vec<ImageBox> = vec![];
        let gts = vec![gt("a", 0, 0.0, 0.0, 1.0, 1.0)];
        assert!(map_range(&dets, &gts, Some(&[0.5, 0.5])).is_err());
        assert!(map_range(&dets, &gts, Some(&[0.4, 0.6])).is_err());
        assert!(map_range(&dets, &gts, Some(&[])).is_err());
    }

    fn random_scene(rng: &mut Rng, max_boxes: usize) -> (Vec<ImageBox>, Vec<ImageBox>) {
        let images = ["im0", "im1"];
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for img in images {
            let n_gt = rng.below(max_boxes + 1);
            for _ in 0..n_gt {
                let x1 = rng.uniform_in(0.0, 50.0);
                let y1 = rng.uniform_in(0.0, 50.0);
                let w = rng.uniform_in(5.0, 30.0);
                let h = rng.uniform_in(5.0, 30.0);
                let class = rng.below(2);
                gts.push(gt(img, class, x1, y1, x1 + w, y1 + h));
                // a detection near this gt with jitter, sometimes dropped
                if rng.chance(0.8) {
                    let jx = rng.uniform_in(-6.0, 6.0);
                    let jy = rng.uniform_in(-6.0, 6.0);
                    let conf = rng.uniform_in(0.1, 1.0);
                    dets.push(det(
                        img,
                        class,
                        conf,
                        x1 + jx,
                        y1 + jy,
                        x1 + w + jx,
                        y1 + h + jy,
                    ));
                }
            }
            // plus some pure noise detections
            let extra = rng.below(3);
            for _ in 0..extra {
                let x1 = rng.uniform_in(0.0, 60.0);
                let y1 = rng.uniform_in(0.0, 60.0);
                dets.push(det(
                    img,
                    rng.below(2),
                    rng.uniform_in(0.1, 1.0),
                    x1,
                    y1,
                    x1 + rng.uniform_in(4.0, 20.0),
                    y1 + rng.uniform_in(4.0, 20.0),
                ));
            }
        }
        (dets, gts)
    }

    #[test]
    fn map_equals_brute_force_on_200_scenes() {
        let mut rng = Rng::seed_from(52);
        for round in 0..200 {
            let (dets, gts) = random_scene(&mut rng, 5);
            if gts.is_empty() {
                continue;
            }
            let s = map_range(&dets, &gts, None).unwrap();
            let (o50, o5095) = oracle_map(&dets, &gts);
            assert!(
                (s.map50 - o50).abs() < 1e-9,
                "round {round}: map50 {} vs oracle {o50}",
                s.map50
            );
            assert!(
                (s.map50_95 - o5095).abs() < 1e-9,
                "round {round}: map50_95 {} vs oracle {o5095}",
                s.map50_95
            );
        }
    }

    #[test]
    fn relabeling_a_tp_never_raises_ap() {
        let mut rng = Rng::seed_from(53);
        for _ in 0..100 {
            let (dets, gts) = random_scene(&mut rng, 4);
            let class0_dets: Vec<ImageBox> = dets
                .iter()
                .filter(|d| d.bbox.class_id == 0)
                .cloned()
                .collect();
            let class0_gts: Vec<ImageBox> = gts
                .iter()
                .filter(|g| g.bbox.class_id == 0)
                .cloned()
                .collect();
            if class0_gts.is_empty() {
                continue;
            }
            let records = match_detections(&class0_dets, &class0_gts, 0.5);
            let base = average_precision(&records, class0_gts.len());
            for i in 0..records.len() {
                if records[i].matched {
                    let mut corrupted = records.clone();
                    corrupted[i].matched = false;
                    let worse = average_precision(&corrupted, class0_gts.len());
                    assert!(worse <= base + 1e-12);
                }
            }
        }
    }

    #[test]
    fn map50_dominates_map50_95() {
        let mut rng = Rng::seed_from(54);
        for _ in 0..100 {
            let (dets, gts) = random_scene(&mut rng, 5);
            if gts.is_empty() {
                continue;
            }
            let s = map_range(&dets, &gts, None).unwrap();
            assert!(s.map50 >= s.map50_95 - 1e-12);
        }
    }

    #[test]
    fn evaluation_ignores_detection_input_order() {
        let mut rng = Rng::seed_from(55);
        let (mut dets, gts) = random_scene(&mut rng, 5);
        let a = map_range(&dets, &gts, None).unwrap();
        dets.reverse();
        let b = map_range(&dets, &gts, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_class_set_gives_header_only_table() {
        let summary = map_range(&[], &[], None).unwrap();
        let table = MetricsTable::from_summary(&summary, &[]);
        assert_eq!(table.rows.len(), 1); // just the aggregate row
        let csv = table.to_csv();
        assert!(csv.starts_with("Class,Instances,P,R,mAP50,mAP50-95\n"));
    }

    #[test]
    fn single_class_all_row_equals_class_row() {
        let gts = vec![gt("a", 0, 0.0, 0.0, 10.0, 10.0)];
        let dets = vec![det("a", 0, 0.9, 0.0, 0.0, 10.0, 10.0)];
        let s = map_range(&dets, &gts, None).unwrap();
        let table = MetricsTable::from_summary(&s, &["amber".into()]);
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].class, "all");
        assert_eq!(table.rows[0].map50, table.rows[1].map50);
        assert_eq!(table.rows[0].instances, table.rows[1].instances);
    }

    #[test]
    fn detected_only_classes_are_excluded_from_the_mean() {
        let gts = vec![gt("a", 0, 0.0, 0.0, 10.0, 10.0)];
        let dets = vec![
            det("a", 0, 0.9, 0.0, 0.0, 10.0, 10.0),
            det("a", 7, 0.9, 30.0, 30.0, 40.0, 40.0), // class with no gt
        ];
        let s = map_range(&dets, &gts, None).unwrap();
        assert_eq!(s.per_class.len(), 1);
        assert_eq!(s.map50, 1.0);
    }

    #[test]
    fn csv_golden_fixture() {
        let gts = vec![
            gt("a", 0, 0.0, 0.0, 10.0, 10.0),
            gt("a", 1, 20.0, 20.0, 40.0, 40.0),
            gt("b", 2, 5.0, 5.0, 25.0, 25.0),
        ];
        let dets = vec![
            det("a", 0, 0.9, 0.0, 0.0, 10.0, 10.0),
            det("a", 1, 0.8, 21.0, 20.0, 41.0, 40.0),
            det("b", 2, 0.7, 50.0, 50.0, 60.0, 60.0),
        ];
        let s = map_range(&dets, &gts, None).unwrap();
        let names = vec!["amber".to_string(), "lime".to_string(), "teal".to_string()];
        let table = MetricsTable::from_summary(&s, &names);
        let csv = table.to_csv();
        let golden = "Class,Instances,P,R,mAP50,mAP50-95\n\
                      all,3,0.667,0.667,0.667,0.633\n\
                      amber,1,1.000,1.000,1.000,1.000\n\
                      lime,1,1.000,1.000,1.000,0.900\n\
                      teal,1,0.000,0.000,0.000,0.000\n";
        assert_eq!(csv, golden);
    }

    #[test]
    fn table_emission_is_byte_stable() {
        let mut rng = Rng::seed_from(56);
        let (dets, gts) = random_scene(&mut rng, 5);
        let s = map_range(&dets, &gts, None).unwrap();
        let names = vec!["x".to_string(), "y".to_string()];
        let a = MetricsTable::from_summary(&s, &names);
        let b = MetricsTable::from_summary(&s, &names);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_aligned_text(), b.to_aligned_text());
    }

    #[test]
    fn prediction_lines_round_trip() {
        let d = det("video_003_frame_12", 1, 0.8125, 1.5, 2.25, 30.0, 42.5);
        let line = format_prediction_line(&d);
        let parsed = parse_predictions(&line, "mem").unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].image_id, d.image_id);
        assert_eq!(parsed[0].bbox.class_id, 1);
        assert!((parsed[0].bbox.confidence - 0.8125).abs() < 1e-6);
        assert!(parse_predictions("a 1 0.5 1 2 3", "mem").is_err());
    }
}

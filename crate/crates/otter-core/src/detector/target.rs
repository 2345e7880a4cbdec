//! Target assignment, box encoding, and raw-map decoding.
//!
//! Decode, per cell and anchor:
//!
//!   bx = (2*sig(tx) - 0.5 + cell_x) * stride      bw = aw * (2*sig(tw))^2
//!   by = (2*sig(ty) - 0.5 + cell_y) * stride      bh = ah * (2*sig(th))^2
//!   confidence = sig(obj) * max_c sig(cls_c)
//!
//! Encoding inverts these exactly, so decode(encode(box)) round-trips. A
//! ground-truth box is assigned at every scale to the cell holding its
//! center and the anchor with the best width-height IoU, when that IoU
//! reaches 0.2.

use crate::detector::{ModelConfig, ANCHORS_PER_SCALE};
use crate::error::Result;
use crate::geometry::{self, NormBox, PixelBox};
use crate::numkit::ops::sigmoid_scalar;
use crate::numkit::tensor::{Scalar, Tensor};

/// Minimum width-height IoU for an anchor to take a ground-truth box.
pub const ANCHOR_MATCH_MIN_IOU: f64 = 0.2;

/// Largest per-dimension box/anchor ratio an anchor may absorb. Keeps the
/// encoded size offset strictly inside the sigmoid's range (bw < 4*aw), so
/// encoding stays exactly invertible.
pub const ANCHOR_MAX_RATIO: f64 = 3.5;

/// One positive cell with its encoded regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveCell {
    pub anchor: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    /// Encoded (tx, ty, tw, th).
    pub t: [f64; 4],
    pub class_id: usize,
    /// The assigned ground truth in image pixels.
    pub gt: PixelBox,
}

/// Assignment result for one scale of one image.
#[derive(Clone, Debug, Default)]
pub struct ScaleTargets {
    pub positives: Vec<PositiveCell>,
}

/// Width-height IoU between a box and an anchor prior.
pub fn wh_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    let union = w * h + aw * ah - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn logit(v: f64) -> f64 {
    let v = v.clamp(1e-4, 1.0 - 1e-4);
    (v / (1.0 - v)).ln()
}

/// Encode a pixel box against a cell and anchor.
pub fn encode_box(
    b: &PixelBox,
    stride: usize,
    cell_x: usize,
    cell_y: usize,
    aw: f64,
    ah: f64,
) -> [f64; 4] {
    let bx = (b.x1 + b.x2) / 2.0;
    let by = (b.y1 + b.y2) / 2.0;
    let bw = b.x2 - b.x1;
    let bh = b.y2 - b.y1;
    let tx = logit((bx / stride as f64 - cell_x as f64 + 0.5) / 2.0);
    let ty = logit((by / stride as f64 - cell_y as f64 + 0.5) / 2.0);
    let tw = logit((bw / aw).sqrt() / 2.0);
    let th = logit((bh / ah).sqrt() / 2.0);
    [tx, ty, tw, th]
}

/// Decode raw offsets for a cell and anchor back to a pixel box.
pub fn decode_cell(
    t: [f64; 4],
    stride: usize,
    cell_x: usize,
    cell_y: usize,
    aw: f64,
    ah: f64,
) -> (f64, f64, f64, f64) {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let bx = (2.0 * sig(t[0]) - 0.5 + cell_x as f64) * stride as f64;
    let by = (2.0 * sig(t[1]) - 0.5 + cell_y as f64) * stride as f64;
    let bw = aw * (2.0 * sig(t[2])).powi(2);
    let bh = ah * (2.0 * sig(t[3])).powi(2);
    (bx, by, bw, bh)
}

/// Assign one image's labels to cells and anchors at every scale.
///
/// Returns per-scale targets plus the number of degenerate boxes rejected
/// (zero width or height).
pub fn assign_targets(labels: &[NormBox], cfg: &ModelConfig) -> ([ScaleTargets; 3], usize) {
    let img = cfg.image_size;
    let mut out: [ScaleTargets; 3] = Default::default();
    let mut rejected = 0usize;
    for nb in labels {
        let (pb, _) = geometry::norm_to_pixel(nb, img, img);
        let bw = pb.x2 - pb.x1;
        let bh = pb.y2 - pb.y1;
        if bw <= 0.0 || bh <= 0.0 {
            rejected += 1;
            continue;
        }
        let bx = (pb.x1 + pb.x2) / 2.0;
        let by = (pb.y1 + pb.y2) / 2.0;
        for s in 0..3 {
            let stride = cfg.strides[s];
            let grid = cfg.grid(s);
            let cell_x = ((bx / stride as f64).floor() as usize).min(grid - 1);
            let cell_y = ((by / stride as f64).floor() as usize).min(grid - 1);
            let (mut best_a, mut best_iou) = (usize::MAX, 0.0);
            for (a, &(aw, ah)) in cfg.anchors[s].iter().enumerate() {
                let ratio = (bw / aw).max(aw / bw).max(bh / ah).max(ah / bh);
                if ratio >= ANCHOR_MAX_RATIO {
                    continue;
                }
                let iou = wh_iou(bw, bh, aw, ah);
                if iou > best_iou {
                    best_iou = iou;
                    best_a = a;
                }
            }
            if best_a == usize::MAX || best_iou < ANCHOR_MATCH_MIN_IOU {
                continue;
            }
            // first assignment wins if two boxes land on the same slot
            if out[s]
                .positives
                .iter()
                .any(|p| p.anchor == best_a && p.cell_x == cell_x && p.cell_y == cell_y)
            {
                continue;
            }
            let (aw, ah) = cfg.anchors[s][best_a];
            out[s].positives.push(PositiveCell {
                anchor: best_a,
                cell_y,
                cell_x,
                t: encode_box(&pb, stride, cell_x, cell_y, aw, ah),
                class_id: nb.class_id,
                gt: pb,
            });
        }
    }
    (out, rejected)
}

/// K-means over training box sizes with an IoU distance, yielding nine
/// anchors split across the three scales by ascending area.
///
/// Deterministic: centers initialize at area quantiles and Lloyd iterations
/// run a fixed count. Falls back to the provided defaults when there are
/// fewer boxes than anchors.
pub fn kmeans_anchors(
    wh: &[(f64, f64)],
    fallback: [[(f64, f64); 3]; 3],
    iters: usize,
) -> [[(f64, f64); 3]; 3] {
    const K: usize = 9;
    if wh.len() < K {
        return fallback;
    }
    let mut sorted: Vec<(f64, f64)> = wh.to_vec();
    sorted.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    let mut centers: Vec<(f64, f64)> = (0..K)
        .map(|i| sorted[(i * (sorted.len() - 1)) / (K - 1)])
        .collect();
    let mut assignment = vec![0usize; sorted.len()];
    for _ in 0..iters {
        for (i, &(w, h)) in sorted.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &(cw, ch)) in centers.iter().enumerate() {
                let d = 1.0 - wh_iou(w, h, cw, ch);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&(f64, f64)> = sorted
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(wh, _)| wh)
                .collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                center.0 = members.iter().map(|m| m.0).sum::<f64>() / n;
                center.1 = members.iter().map(|m| m.1).sum::<f64>() / n;
            }
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    let mut out = fallback;
    for s in 0..3 {
        for a in 0..3 {
            out[s][a] = centers[s * 3 + a];
        }
    }
    out
}

/// Decode one image's raw maps into NMS-ready pixel boxes.
///
/// `raw` holds the three per-scale maps for a single image
/// ([1, A*(5+nc), H, W] or the matching batch slice).
pub fn decode_predictions<T: Scalar>(
    raw: &[Tensor<T>; 3],
    cfg: &ModelConfig,
    batch_index: usize,
    conf_thr: f64,
) -> Result<Vec<PixelBox>> {
    let cpa = cfg.channels_per_anchor();
    let nc = cfg.num_classes;
    let mut dets = Vec::new();
    for s in 0..3 {
        let (b, c, h, w) = raw[s].dims4("decode")?;
        debug_assert_eq!(c, ANCHORS_PER_SCALE * cpa);
        debug_assert!(batch_index < b);
        let plane = h * w;
        let base = batch_index * c * plane;
        let data = raw[s].data();
        for a in 0..ANCHORS_PER_SCALE {
            let (aw, ah) = cfg.anchors[s][a];
            for cy in 0..h {
                for cx in 0..w {
                    let at = |ch: usize| data[base + (a * cpa + ch) * plane + cy * w + cx].to_f64();
                    let obj = sigmoid_scalar(at(4));
                    // cheap upper bound before decoding class scores
                    if obj < conf_thr {
                        continue;
                    }
                    let (mut best_cls, mut best_score) = (0usize, f64::NEG_INFINITY);
                    for k in 0..nc {
                        let v = at(5 + k);
                        if v > best_score {
                            best_score = v;
                            best_cls = k;
                        }
                    }
                    let conf = obj * sigmoid_scalar(best_score);
                    if conf < conf_thr {
                        continue;
                    }
                    let (bx, by, bw, bh) =
                        decode_cell([at(0), at(1), at(2), at(3)], cfg.strides[s], cx, cy, aw, ah);
                    dets.push(PixelBox::new(
                        bx - bw / 2.0,
                        by - bh / 2.0,
                        bx + bw / 2.0,
                        by + bh / 2.0,
                        best_cls,
                        conf,
                    ));
                }
            }
        }
    }
    Ok(dets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Variant;
    use crate::rng::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::new(Variant::Baseline, 4, 2, 128)
    }

    #[test]
    fn centered_box_encodes_to_zero_offsets() {
        let cfg = cfg();
        // center exactly on the center of cell (2, 3) at stride 8
        let cx = (3.0 + 0.5) * 8.0;
        let cy = (2.0 + 0.5) * 8.0;
        let (aw, ah) = cfg.anchors[0][0];
        let b = PixelBox::new(
            cx - aw / 2.0,
            cy - ah / 2.0,
            cx + aw / 2.0,
            cy + ah / 2.0,
            0,
            1.0,
        );
        let t = encode_box(&b, 8, 3, 2, aw, ah);
        assert!(t[0].abs() < 1e-9, "sig(tx) must be 0.5");
        assert!(t[1].abs() < 1e-9);
        // box matches anchor dimensions: sig(tw) = 0.5
        assert!(t[2].abs() < 1e-9);
        assert!(t[3].abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip_random_boxes() {
        let cfg = cfg();
        let mut rng = Rng::seed_from(11);
        for s in 0..3 {
            let stride = cfg.strides[s];
            let grid = cfg.grid(s);
            for _ in 0..1000 {
                let a = rng.below(3);
                let (aw, ah) = cfg.anchors[s][a];
                let cell_x = rng.below(grid);
                let cell_y = rng.below(grid);
                // center within the decodable span of this cell, size within
                // the invertible ratio range (0, 4*anchor)
                let bx = (cell_x as f64 + rng.uniform_in(-0.45, 1.45)) * stride as f64;
                let by = (cell_y as f64 + rng.uniform_in(-0.45, 1.45)) * stride as f64;
                let bw = aw * rng.uniform_in(0.1, 3.8);
                let bh = ah * rng.uniform_in(0.1, 3.8);
                let b = PixelBox::new(
                    bx - bw / 2.0,
                    by - bh / 2.0,
                    bx + bw / 2.0,
                    by + bh / 2.0,
                    0,
                    1.0,
                );
                let t = encode_box(&b, stride, cell_x, cell_y, aw, ah);
                let (dx, dy, dw, dh) = decode_cell(t, stride, cell_x, cell_y, aw, ah);
                assert!((dx - bx).abs() < 1e-4, "bx {bx} vs {dx}");
                assert!((dy - by).abs() < 1e-4);
                assert!((dw - bw).abs() < 1e-4);
                assert!((dh - bh).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn assignment_picks_center_cell_and_best_anchor() {
        let cfg = cfg();
        // 6.4 x 5.76 px box centered at (32, 64)
        let nb = NormBox::new(0.25, 0.5, 0.05, 0.045, 1).unwrap();
        let (targets, rejected) = assign_targets(&[nb], &cfg);
        assert_eq!(rejected, 0);
        // at stride 8: center (32, 64) -> cell (4, 8)
        let p = &targets[0].positives[0];
        assert_eq!((p.cell_x, p.cell_y), (4, 8));
        // anchor must maximize wh-iou among ratio-eligible anchors
        let bw = 0.05 * 128.0;
        let bh = 0.045 * 128.0;
        let best = (0..3)
            .filter(|&i| {
                let (aw, ah) = cfg.anchors[0][i];
                (bw / aw).max(aw / bw).max(bh / ah).max(ah / bh) < ANCHOR_MAX_RATIO
            })
            .max_by(|&i, &j| {
                let a = cfg.anchors[0][i];
                let b = cfg.anchors[0][j];
                wh_iou(bw, bh, a.0, a.1)
                    .partial_cmp(&wh_iou(bw, bh, b.0, b.1))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(p.anchor, best);
        assert_eq!(p.anchor, 2, "hand-checked: the (6.6, 4.6) anchor wins");
        assert_eq!(p.class_id, 1);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        let cfg = cfg();
        let nb = NormBox {
            cx: 0.5,
            cy: 0.5,
            w: 0.0,
            h: 0.1,
            class_id: 0,
        };
        let (targets, rejected) = assign_targets(&[nb], &cfg);
        assert_eq!(rejected, 1);
        assert!(targets.iter().all(|t| t.positives.is_empty()));
    }

    #[test]
    fn low_wh_iou_scales_are_skipped() {
        let cfg = cfg();
        // tiny box: matches s8 anchors but not the huge s32 ones
        let nb = NormBox::new(0.5, 0.5, 0.02, 0.02, 0).unwrap();
        let (targets, _) = assign_targets(&[nb], &cfg);
        assert!(!targets[0].positives.is_empty());
        assert!(targets[2].positives.is_empty());
    }

    #[test]
    fn all_negative_logits_decode_to_nothing() {
        let cfg = cfg();
        let cpa = 3 * cfg.channels_per_anchor();
        let raw = [
            Tensor::<f32>::full(&[1, cpa, 16, 16], -50.0),
            Tensor::<f32>::full(&[1, cpa, 8, 8], -50.0),
            Tensor::<f32>::full(&[1, cpa, 4, 4], -50.0),
        ];
        let dets = decode_predictions(&raw, &cfg, 0, 0.25).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn single_confident_cell_decodes_at_cell_center() {
        let cfg = cfg();
        let cpa = cfg.channels_per_anchor();
        let mut raw = [
            Tensor::<f32>::full(&[1, 3 * cpa, 16, 16], -50.0),
            Tensor::<f32>::full(&[1, 3 * cpa, 8, 8], -50.0),
            Tensor::<f32>::full(&[1, 3 * cpa, 4, 4], -50.0),
        ];
        // scale 0, anchor 1, cell (y=5, x=7): obj +50, tx=ty=0
        let plane = 16 * 16;
        let a = 1;
        for ch in 0..cpa {
            let v = match ch {
                4 => 50.0,
                5 => 50.0, // class 0 certain
                _ => 0.0,
            };
            raw[0].data_mut()[(a * cpa + ch) * plane + 5 * 16 + 7] = v;
        }
        let dets = decode_predictions(&raw, &cfg, 0, 0.25).unwrap();
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        let cx = (d.x1 + d.x2) / 2.0;
        let cy = (d.y1 + d.y2) / 2.0;
        assert!((cx - (7.5 * 8.0)).abs() < 1e-6, "cx {cx}");
        assert!((cy - (5.5 * 8.0)).abs() < 1e-6, "cy {cy}");
        assert_eq!(d.class_id, 0);
        assert!(d.confidence > 0.99);
    }

    #[test]
    fn decode_inverts_assignment_encoding() {
        let cfg = cfg();
        let mut rng = Rng::seed_from(12);
        for _ in 0..200 {
            let w = rng.uniform_in(0.05, 0.4);
            let h = rng.uniform_in(0.05, 0.4);
            let nb = NormBox {
                cx: rng.uniform_in(w / 2.0, 1.0 - w / 2.0),
                cy: rng.uniform_in(h / 2.0, 1.0 - h / 2.0),
                w,
                h,
                class_id: 0,
            };
            let (targets, _) = assign_targets(&[nb], &cfg);
            for (s, st) in targets.iter().enumerate() {
                for p in &st.positives {
                    let (aw, ah) = cfg.anchors[s][p.anchor];
                    let (bx, by, bw, bh) =
                        decode_cell(p.t, cfg.strides[s], p.cell_x, p.cell_y, aw, ah);
                    let ex = (p.gt.x1 + p.gt.x2) / 2.0;
                    let ey = (p.gt.y1 + p.gt.y2) / 2.0;
                    assert!((bx - ex).abs() < 1e-4);
                    assert!((by - ey).abs() < 1e-4);
                    assert!((bw - (p.gt.x2 - p.gt.x1)).abs() < 1e-4);
                    assert!((bh - (p.gt.y2 - p.gt.y1)).abs() < 1e-4);
                }
            }
        }
    }
}

//! Detection loss over raw multi-scale predictions.
//!
//! Three terms: box = mean over positive cells of (1 - IoU(decoded box,
//! assigned ground truth)); obj = BCE over every cell's objectness logit
//! (positives target 1, negatives 0), class-balanced as the mean over
//! negatives plus the mean over positives so a few positive cells are not
//! drowned out by thousands of background cells; cls = BCE over the
//! positive cells' class logits against one-hot targets. The total is the
//! weighted sum.

use std::sync::Arc;

use crate::detector::target::ScaleTargets;
use crate::detector::{ModelConfig, ANCHORS_PER_SCALE};
use crate::error::Result;
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::ops::Activation;
use crate::numkit::tensor::{Scalar, Tensor};

pub struct LossTerms {
    pub box_term: NodeId,
    pub obj_term: NodeId,
    pub cls_term: NodeId,
    pub total: NodeId,
    pub num_positives: usize,
}

/// Build the loss sub-graph. `targets[b]` are the per-scale assignments for
/// batch item `b`; raw maps come from the model forward.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    raw: &[NodeId; 3],
    targets: &[[ScaleTargets; 3]],
    cfg: &ModelConfig,
    weights: (f64, f64, f64),
) -> Result<LossTerms> {
    let cpa = cfg.channels_per_anchor();
    let nc = cfg.num_classes;
    let batch = targets.len();

    let mut obj_neg_sums: Vec<NodeId> = Vec::new();
    let mut obj_pos_sums: Vec<NodeId> = Vec::new();
    let mut box_sums: Vec<NodeId> = Vec::new();
    let mut cls_sums: Vec<NodeId> = Vec::new();
    let mut total_neg_cells = 0usize;
    let mut total_pos_cells = 0usize;
    let mut total_pos = 0usize;

    for s in 0..3 {
        let (b_dim, _, h, w) = g.value(raw[s]).dims4("detection_loss")?;
        debug_assert_eq!(b_dim, batch, "raw batch does not match targets");
        let plane = h * w;
        let cell_idx = |b: usize, a: usize, ch: usize, y: usize, x: usize| {
            ((b * ANCHORS_PER_SCALE * cpa) + a * cpa + ch) * plane + y * w + x
        };

        // objectness over every cell, split into negative and positive sets
        let mut is_positive = vec![false; batch * ANCHORS_PER_SCALE * plane];
        for (b, per_image) in targets.iter().enumerate() {
            for p in &per_image[s].positives {
                let flat = ((b * ANCHORS_PER_SCALE + p.anchor) * plane) + p.cell_y * w + p.cell_x;
                is_positive[flat] = true;
            }
        }
        let mut neg_idx = Vec::with_capacity(is_positive.len());
        let mut pos_idx = Vec::new();
        let mut flat = 0usize;
        for b in 0..batch {
            for a in 0..ANCHORS_PER_SCALE {
                for y in 0..h {
                    for x in 0..w {
                        if is_positive[flat] {
                            pos_idx.push(cell_idx(b, a, 4, y, x));
                        } else {
                            neg_idx.push(cell_idx(b, a, 4, y, x));
                        }
                        flat += 1;
                    }
                }
            }
        }
        total_neg_cells += neg_idx.len();
        total_pos_cells += pos_idx.len();
        if !neg_idx.is_empty() {
            let n = neg_idx.len();
            let logits = g.gather(raw[s], Arc::new(neg_idx))?;
            let bce = g.bce_with_logits(logits, Arc::new(Tensor::full(&[n], T::ZERO)))?;
            obj_neg_sums.push(g.sum_all(bce));
        }
        if !pos_idx.is_empty() {
            let n = pos_idx.len();
            let logits = g.gather(raw[s], Arc::new(pos_idx))?;
            let bce = g.bce_with_logits(logits, Arc::new(Tensor::full(&[n], T::ONE)))?;
            obj_pos_sums.push(g.sum_all(bce));
        }

        // positives of this scale across the batch
        let mut idx_t = [const { Vec::new() }; 4];
        let mut cell_x_c = Vec::new();
        let mut cell_y_c = Vec::new();
        let mut anchor_w_c = Vec::new();
        let mut anchor_h_c = Vec::new();
        let mut gt_corners: [Vec<T>; 4] = Default::default();
        let mut gt_area = Vec::new();
        let mut cls_idx = Vec::new();
        let mut cls_tgt = Vec::new();
        for (b, per_image) in targets.iter().enumerate() {
            for p in &per_image[s].positives {
                for (ch, slot) in idx_t.iter_mut().enumerate() {
                    slot.push(cell_idx(b, p.anchor, ch, p.cell_y, p.cell_x));
                }
                cell_x_c.push(T::from_f64(p.cell_x as f64));
                cell_y_c.push(T::from_f64(p.cell_y as f64));
                let (aw, ah) = cfg.anchors[s][p.anchor];
                anchor_w_c.push(T::from_f64(aw));
                anchor_h_c.push(T::from_f64(ah));
                gt_corners[0].push(T::from_f64(p.gt.x1));
                gt_corners[1].push(T::from_f64(p.gt.y1));
                gt_corners[2].push(T::from_f64(p.gt.x2));
                gt_corners[3].push(T::from_f64(p.gt.y2));
                gt_area.push(T::from_f64(p.gt.area()));
                for c in 0..nc {
                    cls_idx.push(cell_idx(b, p.anchor, 5 + c, p.cell_y, p.cell_x));
                    cls_tgt.push(if c == p.class_id { T::ONE } else { T::ZERO });
                }
            }
        }
        let n_pos = cell_x_c.len();
        total_pos += n_pos;
        if n_pos == 0 {
            continue;
        }
        let stride = cfg.strides[s] as f64;

        let sig = |g: &mut Graph<T>, x: NodeId| g.activation(x, Activation::Sigmoid);
        let constv = |g: &mut Graph<T>, v: Vec<T>| -> Result<NodeId> {
            Ok(g.constant(Tensor::new(vec![v.len()], v)?))
        };

        // decoded centers: (2*sig(t) - 0.5 + cell) * stride
        let tx = g.gather(raw[s], Arc::new(idx_t[0].clone()))?;
        let ty = g.gather(raw[s], Arc::new(idx_t[1].clone()))?;
        let tw = g.gather(raw[s], Arc::new(idx_t[2].clone()))?;
        let th = g.gather(raw[s], Arc::new(idx_t[3].clone()))?;
        let sx = sig(g, tx);
        let sx = g.affine(sx, 2.0, -0.5);
        let cellx = constv(g, cell_x_c)?;
        let bx = g.add(sx, cellx)?;
        let bx = g.affine(bx, stride, 0.0);
        let sy = sig(g, ty);
        let sy = g.affine(sy, 2.0, -0.5);
        let celly = constv(g, cell_y_c)?;
        let by = g.add(sy, celly)?;
        let by = g.affine(by, stride, 0.0);

        // decoded sizes: anchor * (2*sig(t))^2
        let sw = sig(g, tw);
        let sw = g.affine(sw, 2.0, 0.0);
        let sw2 = g.mul(sw, sw)?;
        let aw = constv(g, anchor_w_c)?;
        let bw = g.mul(sw2, aw)?;
        let sh = sig(g, th);
        let sh = g.affine(sh, 2.0, 0.0);
        let sh2 = g.mul(sh, sh)?;
        let ah = constv(g, anchor_h_c)?;
        let bh = g.mul(sh2, ah)?;

        // predicted corners
        let half_w = g.affine(bw, 0.5, 0.0);
        let half_h = g.affine(bh, 0.5, 0.0);
        let px1 = g.sub(bx, half_w)?;
        let px2 = g.add(bx, half_w)?;
        let py1 = g.sub(by, half_h)?;
        let py2 = g.add(by, half_h)?;

        let gx1 = constv(g, gt_corners[0].clone())?;
        let gy1 = constv(g, gt_corners[1].clone())?;
        let gx2 = constv(g, gt_corners[2].clone())?;
        let gy2 = constv(g, gt_corners[3].clone())?;

        let ix1 = g.max2(px1, gx1)?;
        let ix2 = g.min2(px2, gx2)?;
        let iy1 = g.max2(py1, gy1)?;
        let iy2 = g.min2(py2, gy2)?;
        let iw = g.sub(ix2, ix1)?;
        let iw = g.activation(iw, Activation::Relu);
        let ih = g.sub(iy2, iy1)?;
        let ih = g.activation(ih, Activation::Relu);
        let inter = g.mul(iw, ih)?;

        let area_p = g.mul(bw, bh)?;
        let area_g = constv(g, gt_area)?;
        let areas = g.add(area_p, area_g)?;
        let union = g.sub(areas, inter)?;
        let iou = g.div(inter, union)?;
        let one_minus = g.affine(iou, -1.0, 1.0);
        box_sums.push(g.sum_all(one_minus));

        let cls_logits = g.gather(raw[s], Arc::new(cls_idx))?;
        let cls_bce = g.bce_with_logits(
            cls_logits,
            Arc::new(Tensor::new(vec![cls_tgt.len()], cls_tgt)?),
        )?;
        cls_sums.push(g.sum_all(cls_bce));
    }

    let zero = g.constant(Tensor::scalar(T::ZERO));
    let sum_nodes = |g: &mut Graph<T>, nodes: &[NodeId]| -> Result<NodeId> {
        let mut acc = None;
        for &n in nodes {
            acc = Some(match acc {
                None => n,
                Some(a) => g.add(a, n)?,
            });
        }
        Ok(acc.unwrap_or(zero))
    };

    let neg_total = sum_nodes(g, &obj_neg_sums)?;
    let neg_mean = g.affine(neg_total, 1.0 / total_neg_cells.max(1) as f64, 0.0);
    let pos_total = sum_nodes(g, &obj_pos_sums)?;
    let pos_mean = g.affine(pos_total, 1.0 / total_pos_cells.max(1) as f64, 0.0);
    let obj_term = g.add(neg_mean, pos_mean)?;
    let box_total = sum_nodes(g, &box_sums)?;
    let box_term = g.affine(box_total, 1.0 / total_pos.max(1) as f64, 0.0);
    let cls_total = sum_nodes(g, &cls_sums)?;
    let cls_term = g.affine(
        cls_total,
        1.0 / (total_pos.max(1) * cfg.num_classes) as f64,
        0.0,
    );

    let wb = g.affine(box_term, weights.0, 0.0);
    let wo = g.affine(obj_term, weights.1, 0.0);
    let wc = g.affine(cls_term, weights.2, 0.0);
    let partial = g.add(wb, wo)?;
    let total = g.add(partial, wc)?;

    Ok(LossTerms {
        box_term,
        obj_term,
        cls_term,
        total,
        num_positives: total_pos,
    })
}

//! Bounding-box representations, conversions, letterboxing, IoU and NMS.
//!
//! Two box conventions coexist: normalized center-size ([`NormBox`], the
//! label format) and pixel corners ([`PixelBox`], what IoU/NMS work on).
//! Coordinates are continuous reals; area is (x2-x1)*(y2-y1), which keeps
//! IoU free of off-by-one conventions.

use crate::error::{Error, Result};
use crate::numkit::tensor::{Scalar, Tensor};

pub const NMS_IOU_DEFAULT: f64 = 0.45;
pub const NMS_CONF_DEFAULT: f64 = 0.25;

/// Normalized center-size box (fractions of image extent) plus class id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Result<Self> {
        let b = NormBox {
            cx,
            cy,
            w,
            h,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "norm box out of range: cx={} cy={} w={} h={}",
                self.cx, self.cy, self.w, self.h
            )))
        }
    }

    /// Clamp the box to the unit square, shrinking extent as needed.
    pub fn clamped(&self) -> NormBox {
        let x1 = (self.cx - self.w / 2.0).clamp(0.0, 1.0);
        let y1 = (self.cy - self.h / 2.0).clamp(0.0, 1.0);
        let x2 = (self.cx + self.w / 2.0).clamp(0.0, 1.0);
        let y2 = (self.cy + self.h / 2.0).clamp(0.0, 1.0);
        NormBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
            class_id: self.class_id,
        }
    }
}

/// Corner-convention pixel box; `confidence` is meaningful for detections
/// and 1.0 for ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
    pub confidence: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, confidence: f64) -> Self {
        PixelBox {
            x1,
            y1,
            x2,
            y2,
            class_id,
            confidence,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Convert a normalized box to pixel corners. Returns the box and a flag
/// reporting whether any coordinate had to be clamped to the image.
pub fn norm_to_pixel(b: &NormBox, img_w: usize, img_h: usize) -> (PixelBox, bool) {
    let (w, h) = (img_w as f64, img_h as f64);
    let x1 = (b.cx - b.w / 2.0) * w;
    let y1 = (b.cy - b.h / 2.0) * h;
    let x2 = (b.cx + b.w / 2.0) * w;
    let y2 = (b.cy + b.h / 2.0) * h;
    let clamped = x1 < 0.0 || y1 < 0.0 || x2 > w || y2 > h;
    (
        PixelBox::new(
            x1.clamp(0.0, w),
            y1.clamp(0.0, h),
            x2.clamp(0.0, w),
            y2.clamp(0.0, h),
            b.class_id,
            1.0,
        ),
        clamped,
    )
}

pub fn pixel_to_norm(b: &PixelBox, img_w: usize, img_h: usize) -> NormBox {
    let (w, h) = (img_w as f64, img_h as f64);
    NormBox {
        cx: (b.x1 + b.x2) / 2.0 / w,
        cy: (b.y1 + b.y2) / 2.0 / h,
        w: (b.x2 - b.x1) / w,
        h: (b.y2 - b.y1) / h,
        class_id: b.class_id,
    }
}

/// Aspect-preserving resize-with-padding geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub src_w: usize,
    pub src_h: usize,
    pub dst: usize,
}

impl LetterboxTransform {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }

    pub fn apply_box(&self, b: &PixelBox) -> PixelBox {
        let (x1, y1) = self.apply(b.x1, b.y1);
        let (x2, y2) = self.apply(b.x2, b.y2);
        PixelBox::new(x1, y1, x2, y2, b.class_id, b.confidence)
    }

    pub fn invert_box(&self, b: &PixelBox) -> PixelBox {
        let (x1, y1) = self.invert(b.x1, b.y1);
        let (x2, y2) = self.invert(b.x2, b.y2);
        PixelBox::new(x1, y1, x2, y2, b.class_id, b.confidence)
    }

    /// Map a normalized label on the source image to a normalized label on
    /// the letterboxed square.
    pub fn map_norm_box(&self, b: &NormBox) -> NormBox {
        let (pb, _) = norm_to_pixel(b, self.src_w, self.src_h);
        let mapped = self.apply_box(&pb);
        pixel_to_norm(&mapped, self.dst, self.dst)
    }
}

/// Bilinear resize of a [C, H, W] tensor.
pub fn resize_bilinear<T: Scalar>(
    image: &Tensor<T>,
    new_h: usize,
    new_w: usize,
) -> Result<Tensor<T>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape(
            "resize_bilinear",
            format!("expected [C,H,W], got {:?}", image.shape()),
        ));
    };
    let (c, h, w) = (*c, *h, *w);
    let mut out = Tensor::zeros(&[c, new_h, new_w]);
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for ci in 0..c {
        let src = &image.data()[ci * h * w..][..h * w];
        let dst = &mut out.data_mut()[ci * new_h * new_w..][..new_h * new_w];
        for oy in 0..new_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..new_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = src[y0 * w + x0].to_f64();
                let v01 = src[y0 * w + x1].to_f64();
                let v10 = src[y1 * w + x0].to_f64();
                let v11 = src[y1 * w + x1].to_f64();
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bot = v10 * (1.0 - wx) + v11 * wx;
                dst[oy * new_w + ox] = T::from_f64(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Ok(out)
}

/// Aspect-preserving resize of a [C, H, W] image to a `dst`x`dst` square,
/// padding the short axis with `fill`.
pub fn letterbox<T: Scalar>(
    image: &Tensor<T>,
    dst: usize,
    fill: T,
) -> Result<(Tensor<T>, LetterboxTransform)> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape(
            "letterbox",
            format!("expected [C,H,W], got {:?}", image.shape()),
        ));
    };
    let (c, h, w) = (*c, *h, *w);
    let scale = dst as f64 / h.max(w) as f64;
    let new_h = ((h as f64 * scale).round() as usize).clamp(1, dst);
    let new_w = ((w as f64 * scale).round() as usize).clamp(1, dst);
    let pad_x = ((dst - new_w) / 2) as f64;
    let pad_y = ((dst - new_h) / 2) as f64;
    let resized = if new_h == h && new_w == w {
        image.clone()
    } else {
        resize_bilinear(image, new_h, new_w)?
    };
    let mut out = Tensor::full(&[c, dst, dst], fill);
    let (px, py) = (pad_x as usize, pad_y as usize);
    for ci in 0..c {
        let src = &resized.data()[ci * new_h * new_w..][..new_h * new_w];
        let dst_plane = &mut out.data_mut()[ci * dst * dst..][..dst * dst];
        for y in 0..new_h {
            dst_plane[(py + y) * dst + px..][..new_w].copy_from_slice(&src[y * new_w..][..new_w]);
        }
    }
    Ok((
        out,
        LetterboxTransform {
            scale,
            pad_x,
            pad_y,
            src_w: w,
            src_h: h,
            dst,
        },
    ))
}

/// Intersection-over-union of two corner boxes. Zero-area union gives 0.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy class-aware non-maximum suppression.
///
/// Detections below `conf_thr` are dropped; survivors are ordered by
/// descending confidence with ties broken by input order.
pub fn nms(dets: &[PixelBox], iou_thr: f64, conf_thr: f64) -> Vec<PixelBox> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= conf_thr)
        .collect();
    // stable sort keeps input order on confidence ties
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<PixelBox> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == candidate.class_id && iou(k, candidate) > iou_thr);
        if !suppressed {
            kept.push(*candidate);
        }
    }
    kept
}

/// One YOLO-format label line: `class_id cx cy w h`, normalized coordinates.
pub fn parse_label_line(line: &str) -> std::result::Result<NormBox, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(format!(
            "expected 5 fields `class cx cy w h`, got {}",
            fields.len()
        ));
    }
    let class_id: usize = fields[0]
        .parse()
        .map_err(|_| format!("bad class id '{}'", fields[0]))?;
    let mut vals = [0.0f64; 4];
    for (v, f) in vals.iter_mut().zip(&fields[1..]) {
        *v = f.parse().map_err(|_| format!("bad number '{f}'"))?;
    }
    NormBox::new(vals[0], vals[1], vals[2], vals[3], class_id)
        .map_err(|e| format!("invalid box: {e}"))
}

pub fn format_label_line(b: &NormBox) -> String {
    format!(
        "{} {:.6} {:.6} {:.6} {:.6}",
        b.class_id, b.cx, b.cy, b.w, b.h
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_norm_box(rng: &mut Rng) -> NormBox {
        let w = rng.uniform_in(0.05, 0.5);
        let h = rng.uniform_in(0.05, 0.5);
        NormBox {
            cx: rng.uniform_in(w / 2.0, 1.0 - w / 2.0),
            cy: rng.uniform_in(h / 2.0, 1.0 - h / 2.0),
            w,
            h,
            class_id: rng.below(3),
        }
    }

    #[test]
    fn norm_to_pixel_full_frame() {
        let b = NormBox::new(0.5, 0.5, 1.0, 1.0, 0).unwrap();
        let (p, clamped) = norm_to_pixel(&b, 640, 640);
        assert!(!clamped);
        assert_eq!((p.x1, p.y1, p.x2, p.y2), (0.0, 0.0, 640.0, 640.0));
    }

    #[test]
    fn norm_to_pixel_centered() {
        let b = NormBox::new(0.5, 0.5, 0.5, 0.5, 0).unwrap();
        let (p, _) = norm_to_pixel(&b, 640, 640);
        assert_eq!((p.x1, p.y1, p.x2, p.y2), (160.0, 160.0, 480.0, 480.0));
    }

    #[test]
    fn norm_pixel_round_trip() {
        let mut rng = Rng::seed_from(21);
        for _ in 0..200 {
            let b = random_norm_box(&mut rng);
            let (p, clamped) = norm_to_pixel(&b, 640, 480);
            assert!(!clamped);
            let back = pixel_to_norm(&p, 640, 480);
            assert!((back.cx - b.cx).abs() < 1e-9);
            assert!((back.cy - b.cy).abs() < 1e-9);
            assert!((back.w - b.w).abs() < 1e-9);
            assert!((back.h - b.h).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_box_reports_clamp() {
        let b = NormBox {
            cx: 0.05,
            cy: 0.5,
            w: 0.2,
            h: 0.2,
            class_id: 0,
        };
        let (p, clamped) = norm_to_pixel(&b, 100, 100);
        assert!(clamped);
        assert_eq!(p.x1, 0.0);
    }

    #[test]
    fn letterbox_square_is_pure_resize() {
        let img = Tensor::<f32>::full(&[3, 32, 32], 0.5);
        let (out, t) = letterbox(&img, 64, 0.0f32).unwrap();
        assert_eq!(out.shape(), &[3, 64, 64]);
        assert_eq!(t.pad_x, 0.0);
        assert_eq!(t.pad_y, 0.0);
        assert_eq!(t.scale, 2.0);
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn letterbox_240x320_to_640() {
        let img = Tensor::<f32>::zeros(&[1, 240, 320]);
        let (out, t) = letterbox(&img, 640, 0.0f32).unwrap();
        assert_eq!(out.shape(), &[1, 640, 640]);
        assert_eq!(t.scale, 2.0);
        assert_eq!(t.pad_x, 0.0);
        assert_eq!(t.pad_y, 80.0);
    }

    #[test]
    fn letterbox_corner_mapping_and_inverse() {
        let img = Tensor::<f32>::zeros(&[1, 240, 320]);
        let (_, t) = letterbox(&img, 640, 0.0f32).unwrap();
        assert_eq!(t.apply(0.0, 0.0), (t.pad_x, t.pad_y));
        let mut rng = Rng::seed_from(22);
        for _ in 0..100 {
            let x = rng.uniform_in(0.0, 320.0);
            let y = rng.uniform_in(0.0, 240.0);
            let (mx, my) = t.apply(x, y);
            let (bx, by) = t.invert(mx, my);
            assert!((bx - x).abs() < 1e-6 && (by - y).abs() < 1e-6);
        }
    }

    #[test]
    fn iou_reflexive_disjoint_and_hand_case() {
        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0, 0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = PixelBox::new(10.0, 10.0, 12.0, 12.0, 0, 1.0);
        assert_eq!(iou(&a, &far), 0.0);
        // inter 2, union 6
        let b = PixelBox::new(1.0, 0.0, 3.0, 2.0, 0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_properties_random() {
        let mut rng = Rng::seed_from(23);
        for _ in 0..500 {
            let a = {
                let (b, _) = norm_to_pixel(&random_norm_box(&mut rng), 100, 100);
                b
            };
            let b = {
                let (b, _) = norm_to_pixel(&random_norm_box(&mut rng), 100, 100);
                b
            };
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            assert!((ab - ba).abs() < 1e-12, "symmetry");
            assert!((0.0..=1.0).contains(&ab), "range");
            assert_eq!(iou(&a, &a), 1.0, "reflexivity");
        }
    }

    #[test]
    fn zero_area_union_is_zero() {
        let degenerate = PixelBox::new(1.0, 1.0, 1.0, 1.0, 0, 1.0);
        assert_eq!(iou(&degenerate, &degenerate), 0.0);
    }

    #[test]
    fn nms_identical_boxes_keeps_strongest() {
        let a = PixelBox::new(0.0, 0.0, 10.0, 10.0, 0, 0.9);
        let b = PixelBox::new(0.0, 0.0, 10.0, 10.0, 0, 0.8);
        let out = nms(&[b, a], NMS_IOU_DEFAULT, NMS_CONF_DEFAULT);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
    }

    #[test]
    fn nms_distinct_classes_survive() {
        let a = PixelBox::new(0.0, 0.0, 10.0, 10.0, 0, 0.9);
        let b = PixelBox::new(20.0, 0.0, 30.0, 10.0, 1, 0.8);
        let out = nms(&[a, b], NMS_IOU_DEFAULT, NMS_CONF_DEFAULT);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn nms_same_box_other_class_not_suppressed() {
        let a = PixelBox::new(0.0, 0.0, 10.0, 10.0, 0, 0.9);
        let b = PixelBox::new(0.0, 0.0, 10.0, 10.0, 1, 0.8);
        assert_eq!(nms(&[a, b], 0.45, 0.25).len(), 2);
    }

    /// Independent O(n^2) reference: a detection survives iff no
    /// higher-ranked same-class detection overlaps it above the threshold.
    fn brute_force_nms(dets: &[PixelBox], iou_thr: f64, conf_thr: f64) -> Vec<PixelBox> {
        let mut ranked: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].confidence >= conf_thr)
            .collect();
        ranked.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
        let mut alive = vec![true; ranked.len()];
        for i in 0..ranked.len() {
            if !alive[i] {
                continue;
            }
            for j in (i + 1)..ranked.len() {
                if alive[j]
                    && dets[ranked[i]].class_id == dets[ranked[j]].class_id
                    && iou(&dets[ranked[i]], &dets[ranked[j]]) > iou_thr
                {
                    alive[j] = false;
                }
            }
        }
        ranked
            .into_iter()
            .zip(alive)
            .filter(|(_, a)| *a)
            .map(|(i, _)| dets[i])
            .collect()
    }

    #[test]
    fn nms_matches_brute_force_on_random_sets() {
        let mut rng = Rng::seed_from(24);
        for round in 0..20 {
            let dets: Vec<PixelBox> = (0..50)
                .map(|_| {
                    let nb = random_norm_box(&mut rng);
                    let (mut pb, _) = norm_to_pixel(&nb, 64, 64);
                    pb.confidence = rng.uniform_in(0.0, 1.0);
                    pb
                })
                .collect();
            let fast = nms(&dets, 0.45, 0.25);
            let slow = brute_force_nms(&dets, 0.45, 0.25);
            assert_eq!(fast, slow, "round {round}");
        }
    }

    #[test]
    fn nms_subset_and_monotone() {
        let mut rng = Rng::seed_from(25);
        let dets: Vec<PixelBox> = (0..40)
            .map(|_| {
                let nb = random_norm_box(&mut rng);
                let (mut pb, _) = norm_to_pixel(&nb, 64, 64);
                pb.confidence = rng.uniform_in(0.0, 1.0);
                pb
            })
            .collect();
        let out = nms(&dets, 0.45, 0.25);
        for o in &out {
            assert!(dets.contains(o), "output must be a subset of input");
        }
        let strict = nms(&dets, 0.45, 0.6);
        assert!(strict.len() <= out.len());
        for s in &strict {
            assert!(out.contains(s), "raising conf_thr never adds detections");
        }
    }

    #[test]
    fn label_line_round_trip_and_malformed() {
        let b = NormBox::new(0.5, 0.25, 0.125, 0.0625, 3).unwrap();
        let line = format_label_line(&b);
        let parsed = parse_label_line(&line).unwrap();
        assert_eq!(parsed.class_id, 3);
        assert!((parsed.cx - b.cx).abs() < 1e-6);
        assert!(parse_label_line("0 0.5 0.5 0.25").is_err(), "4 fields");
        assert!(parse_label_line("x 0.5 0.5 0.25 0.25").is_err());
        assert!(
            parse_label_line("0 0.5 0.5 0.0 0.25").is_err(),
            "zero width"
        );
    }
}

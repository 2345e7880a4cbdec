//! Temporal augmentations with label-space propagation.
//!
//! Five transforms: mosaic, mixup, random erasing, Gaussian blur, Gaussian
//! noise. Sequence-level transforms sample their geometry once per window
//! and apply it to every frame, keeping the window temporally coherent.
//! Everything is deterministic under the supplied [`Rng`].

use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::geometry::{resize_bilinear, NormBox};
use crate::numkit::tensor::Tensor;
use crate::rng::Rng;

/// Minimum fraction of a box's area that must survive mosaic clipping.
pub const MOSAIC_MIN_AREA_KEEP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mosaic_p: f64,
    pub mixup_p: f64,
    pub mixup_lambda_range: (f64, f64),
    pub erase_p: f64,
    pub erase_area_range: (f64, f64),
    pub blur_p: f64,
    pub blur_sigma_range: (f64, f64),
    pub noise_p: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mosaic_p: 0.5,
            mixup_p: 0.15,
            mixup_lambda_range: (0.3, 0.7),
            erase_p: 0.3,
            erase_area_range: (0.02, 0.2),
            blur_p: 0.2,
            blur_sigma_range: (0.5, 2.0),
            noise_p: 0.2,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("mosaic_p", self.mosaic_p),
            ("mixup_p", self.mixup_p),
            ("erase_p", self.erase_p),
            ("blur_p", self.blur_p),
            ("noise_p", self.noise_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        let ranges = [
            ("mixup_lambda_range", self.mixup_lambda_range),
            ("erase_area_range", self.erase_area_range),
            ("blur_sigma_range", self.blur_sigma_range),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Config(format!(
                    "{name} must be ordered, got ({lo}, {hi})"
                )));
            }
        }
        if self.mixup_lambda_range.0 < 0.0 || self.mixup_lambda_range.1 > 1.0 {
            return Err(Error::Config(
                "mixup_lambda_range must sit inside (0,1)".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parameters actually applied to a frame; identical across a window for
/// geometric transforms.
#[derive(Clone, Debug, PartialEq)]
pub enum AppliedTransform {
    Mosaic {
        center_x: f64,
        center_y: f64,
    },
    Mixup {
        lambda: f64,
    },
    Erase {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    },
    Blur {
        sigma: f64,
    },
    Noise {
        sigma: f64,
    },
}

/// Per-frame record of what was applied, for coherence checks.
pub type FrameTransformRecord = Vec<AppliedTransform>;

fn check_same_geometry(seqs: &[&FrameSequence]) -> Result<(usize, usize, usize)> {
    let first = seqs[0];
    let shape = first.frames[0].shape().to_vec();
    let t = first.len();
    for s in seqs {
        if s.len() != t {
            return Err(Error::shape(
                "augment",
                format!("sequence lengths differ: {} vs {t}", s.len()),
            ));
        }
        for f in &s.frames {
            if f.shape() != shape {
                return Err(Error::shape(
                    "augment",
                    format!("frame shapes differ: {:?} vs {:?}", f.shape(), shape),
                ));
            }
        }
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Blend four time-aligned sequences into one: per time step the four frames
/// fill a 2x2 grid split at a jittered center, each quadrant rescaled from
/// its source frame. The same grid is used for every time step.
pub fn temporal_mosaic(seqs: [&FrameSequence; 4], rng: &mut Rng) -> Result<FrameSequence> {
    let cx = rng.uniform_in(0.25, 0.75);
    let cy = rng.uniform_in(0.25, 0.75);
    mosaic_with_center(seqs, cx, cy)
}

/// Mosaic with an explicit center point (fractions of the canvas), so the
/// caller can record the applied geometry.
pub fn mosaic_with_center(
    seqs: [&FrameSequence; 4],
    center_x: f64,
    center_y: f64,
) -> Result<FrameSequence> {
    let (c, h, w) = check_same_geometry(&seqs)?;
    let t = seqs[0].len();
    let split_x = ((center_x * w as f64).round() as usize).clamp(1, w - 1);
    let split_y = ((center_y * h as f64).round() as usize).clamp(1, h - 1);
    // quadrant origin and size, in source order TL, TR, BL, BR
    let quads = [
        (0usize, 0usize, split_x, split_y),
        (split_x, 0, w - split_x, split_y),
        (0, split_y, split_x, h - split_y),
        (split_x, split_y, w - split_x, h - split_y),
    ];

    let mut frames = Vec::with_capacity(t);
    let mut labels = Vec::with_capacity(t);
    for ti in 0..t {
        let mut canvas = Tensor::<f32>::zeros(&[c, h, w]);
        let mut frame_labels: Vec<NormBox> = Vec::new();
        for (q, seq) in quads.iter().zip(seqs.iter()) {
            let (qx, qy, qw, qh) = *q;
            let resized = resize_bilinear(&seq.frames[ti], qh, qw)?;
            for ci in 0..c {
                let src = &resized.data()[ci * qh * qw..][..qh * qw];
                let dst = &mut canvas.data_mut()[ci * h * w..][..h * w];
                for y in 0..qh {
                    dst[(qy + y) * w + qx..][..qw].copy_from_slice(&src[y * qw..][..qw]);
                }
            }
            for b in &seq.labels[ti] {
                if let Some(mapped) = map_box_into_quadrant(b, *q, w, h) {
                    frame_labels.push(mapped);
                }
            }
        }
        frames.push(canvas);
        labels.push(frame_labels);
    }
    Ok(FrameSequence {
        video_id: format!("mosaic({})", seqs.map(|s| s.video_id.clone()).join("+")),
        start_index: seqs[0].start_index,
        frames,
        labels,
    })
}

/// Map a normalized box from a source frame into its quadrant on the canvas,
/// clipping to the quadrant and dropping boxes that lose too much area.
fn map_box_into_quadrant(
    b: &NormBox,
    quad: (usize, usize, usize, usize),
    canvas_w: usize,
    canvas_h: usize,
) -> Option<NormBox> {
    let (qx, qy, qw, qh) = quad;
    // box corners inside the quadrant, in canvas pixels
    let x1 = qx as f64 + (b.cx - b.w / 2.0) * qw as f64;
    let x2 = qx as f64 + (b.cx + b.w / 2.0) * qw as f64;
    let y1 = qy as f64 + (b.cy - b.h / 2.0) * qh as f64;
    let y2 = qy as f64 + (b.cy + b.h / 2.0) * qh as f64;
    let full_area = (x2 - x1) * (y2 - y1);
    // clip to the quadrant
    let cx1 = x1.max(qx as f64);
    let cy1 = y1.max(qy as f64);
    let cx2 = x2.min((qx + qw) as f64);
    let cy2 = y2.min((qy + qh) as f64);
    let clipped_area = (cx2 - cx1).max(0.0) * (cy2 - cy1).max(0.0);
    if full_area <= 0.0 || clipped_area < MOSAIC_MIN_AREA_KEEP * full_area {
        return None;
    }
    Some(NormBox {
        cx: (cx1 + cx2) / 2.0 / canvas_w as f64,
        cy: (cy1 + cy2) / 2.0 / canvas_h as f64,
        w: (cx2 - cx1) / canvas_w as f64,
        h: (cy2 - cy1) / canvas_h as f64,
        class_id: b.class_id,
    })
}

/// Frame-wise convex blend of two sequences; labels are the union of both.
pub fn temporal_mixup(a: &FrameSequence, b: &FrameSequence, lambda: f64) -> Result<FrameSequence> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "mixup lambda must be in [0,1], got {lambda}"
        )));
    }
    check_same_geometry(&[a, b])?;
    let lam = lambda as f32;
    let mut frames = Vec::with_capacity(a.len());
    let mut labels = Vec::with_capacity(a.len());
    for ti in 0..a.len() {
        let mut out = a.frames[ti].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(b.frames[ti].data()) {
            *o = lam * *o + (1.0 - lam) * bv;
        }
        frames.push(out);
        let mut merged = a.labels[ti].clone();
        merged.extend(b.labels[ti].iter().copied());
        labels.push(merged);
    }
    Ok(FrameSequence {
        video_id: format!("mixup({}+{})", a.video_id, b.video_id),
        start_index: a.start_index,
        frames,
        labels,
    })
}

/// Rectangle with an area fraction drawn from `area_range`, fully inside a
/// `w` x `h` frame.
pub fn sample_erase_rect(
    rng: &mut Rng,
    area_range: (f64, f64),
    w: usize,
    h: usize,
) -> (usize, usize, usize, usize) {
    let frac = rng.uniform_in(area_range.0, area_range.1).clamp(0.0, 1.0);
    let area = frac * (w * h) as f64;
    // aspect ratio in [0.5, 2]
    let aspect = rng.uniform_in(0.5, 2.0);
    let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let rh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let x = rng.below(w - rw + 1);
    let y = rng.below(h - rh + 1);
    (x, y, rw, rh)
}

/// Fill a rectangle with uniform noise in `[0,1]`. Labels are unchanged: the
/// point is to force detection from partial evidence.
pub fn erase_rect(
    frame: &Tensor<f32>,
    rect: (usize, usize, usize, usize),
    rng: &mut Rng,
) -> Tensor<f32> {
    let [c, h, w] = frame.shape() else {
        return frame.clone();
    };
    let (c, h, w) = (*c, *h, *w);
    let (x, y, rw, rh) = rect;
    let mut out = frame.clone();
    for ci in 0..c {
        for yy in y..(y + rh).min(h) {
            for xx in x..(x + rw).min(w) {
                out.data_mut()[ci * h * w + yy * w + xx] = rng.uniform() as f32;
            }
        }
    }
    out
}

/// Single-frame erase with a freshly sampled rectangle.
pub fn random_erase(frame: &Tensor<f32>, rng: &mut Rng, cfg: &AugmentConfig) -> Tensor<f32> {
    let [_, h, w] = frame.shape() else {
        return frame.clone();
    };
    if cfg.erase_area_range.1 <= 0.0 {
        return frame.clone();
    }
    let rect = sample_erase_rect(rng, cfg.erase_area_range, *w, *h);
    erase_rect(frame, rect, rng)
}

/// Normalized 1-D Gaussian taps for the given sigma; length 2*ceil(3*sigma)+1.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflect padding; sigma 0 is the identity.
pub fn random_blur(frame: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let [c, h, w] = frame.shape() else {
        return frame.clone();
    };
    let (c, h, w) = (*c, *h, *w);
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as i64;
    let mut horiz = Tensor::<f32>::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = &frame.data()[ci * h * w..][..h * w];
        let dst = &mut horiz.data_mut()[ci * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (k, tap) in taps.iter().enumerate() {
                    let xi = reflect(x as i64 + k as i64 - radius, w as i64);
                    acc += tap * src[y * w + xi] as f64;
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    let mut out = Tensor::<f32>::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = &horiz.data()[ci * h * w..][..h * w];
        let dst = &mut out.data_mut()[ci * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (k, tap) in taps.iter().enumerate() {
                    let yi = reflect(y as i64 + k as i64 - radius, h as i64);
                    acc += tap * src[yi * w + x] as f64;
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    out
}

/// Add i.i.d. Gaussian noise and clamp back to `[0,1]`.
pub fn gaussian_noise(frame: &Tensor<f32>, sigma: f64, rng: &mut Rng) -> Tensor<f32> {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let mut out = frame.clone();
    for v in out.data_mut() {
        *v = (*v + (rng.normal() * sigma) as f32).clamp(0.0, 1.0);
    }
    out
}

/// Apply the configured augmentation stack to one training window.
///
/// `neighbors` supplies windows from other videos for mosaic and mixup; when
/// too few are available those transforms are skipped. Geometric parameters
/// are sampled once per window and reused for every frame. Returns the
/// augmented window plus one transform record per frame.
pub fn augment_window(
    seq: &FrameSequence,
    neighbors: &[&FrameSequence],
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(FrameSequence, Vec<FrameTransformRecord>)> {
    let t = seq.len();
    let mut current = seq.clone();
    let mut records: Vec<FrameTransformRecord> = vec![Vec::new(); t];
    let record_all = |records: &mut Vec<FrameTransformRecord>, tr: AppliedTransform| {
        for r in records.iter_mut() {
            r.push(tr.clone());
        }
    };

    if neighbors.len() >= 3 && rng.chance(cfg.mosaic_p) {
        let picks = [
            neighbors[rng.below(neighbors.len())],
            neighbors[rng.below(neighbors.len())],
            neighbors[rng.below(neighbors.len())],
        ];
        let center_x = rng.uniform_in(0.25, 0.75);
        let center_y = rng.uniform_in(0.25, 0.75);
        current = mosaic_with_center([&current, picks[0], picks[1], picks[2]], center_x, center_y)?;
        record_all(
            &mut records,
            AppliedTransform::Mosaic { center_x, center_y },
        );
    }

    if !neighbors.is_empty() && rng.chance(cfg.mixup_p) {
        let other = neighbors[rng.below(neighbors.len())];
        let lambda = rng.uniform_in(cfg.mixup_lambda_range.0, cfg.mixup_lambda_range.1);
        current = temporal_mixup(&current, other, lambda)?;
        record_all(&mut records, AppliedTransform::Mixup { lambda });
    }

    let [_, h, w] = current.frames[0].shape() else {
        return Err(Error::shape("augment_window", "frames must be [C,H,W]"));
    };
    let (h, w) = (*h, *w);

    if rng.chance(cfg.erase_p) && cfg.erase_area_range.1 > 0.0 {
        let rect = sample_erase_rect(rng, cfg.erase_area_range, w, h);
        for frame in &mut current.frames {
            *frame = erase_rect(frame, rect, rng);
        }
        let (x, y, rw, rh) = rect;
        record_all(&mut records, AppliedTransform::Erase { x, y, w: rw, h: rh });
    }

    if rng.chance(cfg.blur_p) {
        let sigma = rng.uniform_in(cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
        for frame in &mut current.frames {
            *frame = random_blur(frame, sigma);
        }
        record_all(&mut records, AppliedTransform::Blur { sigma });
    }

    if rng.chance(cfg.noise_p) && cfg.noise_sigma > 0.0 {
        for frame in &mut current.frames {
            *frame = gaussian_noise(frame, cfg.noise_sigma, rng);
        }
        record_all(
            &mut records,
            AppliedTransform::Noise {
                sigma: cfg.noise_sigma,
            },
        );
    }

    Ok((current, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_seq(id: &str, t: usize, c: usize, hw: usize, value: f32) -> FrameSequence {
        FrameSequence {
            video_id: id.into(),
            start_index: 0,
            frames: (0..t).map(|_| Tensor::full(&[c, hw, hw], value)).collect(),
            labels: vec![Vec::new(); t],
        }
    }

    #[test]
    fn mosaic_of_identical_constant_sequences_is_constant() {
        let s = const_seq("a", 3, 3, 16, 0.6);
        let mut rng = Rng::seed_from(1);
        let out = temporal_mosaic([&s, &s, &s, &s], &mut rng).unwrap();
        assert_eq!(out.len(), 3);
        for f in &out.frames {
            assert_eq!(f.shape(), &[3, 16, 16]);
            assert!(f.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
        }
    }

    #[test]
    fn mosaic_center_fixed_at_middle_maps_full_boxes_to_quadrants() {
        let full = NormBox::new(0.5, 0.5, 1.0, 1.0, 0).unwrap();
        let mut seqs = Vec::new();
        for i in 0..4 {
            let mut s = const_seq(&format!("s{i}"), 1, 1, 32, 0.5);
            s.labels[0].push(full);
            seqs.push(s);
        }
        // force the exact middle by searching a seed whose jitter is ~0.5
        // is fragile; instead call the mapping oracle directly
        let quads = [
            (0usize, 0usize, 16usize, 16usize),
            (16, 0, 16, 16),
            (0, 16, 16, 16),
            (16, 16, 16, 16),
        ];
        for q in quads {
            let mapped = map_box_into_quadrant(&full, q, 32, 32).unwrap();
            // each mapped box covers exactly its quadrant
            assert!((mapped.w - 0.5).abs() < 1.0 / 32.0);
            assert!((mapped.h - 0.5).abs() < 1.0 / 32.0);
            let cx_expect = (q.0 as f64 + 8.0) / 32.0;
            let cy_expect = (q.1 as f64 + 8.0) / 32.0;
            assert!((mapped.cx - cx_expect).abs() < 1.0 / 32.0);
            assert!((mapped.cy - cy_expect).abs() < 1.0 / 32.0);
        }
        let _ = seqs;
    }

    #[test]
    fn mosaic_same_seed_bitwise_identical() {
        let mut a_rng = Rng::seed_from(42);
        let mut b_rng = Rng::seed_from(42);
        let mut s = const_seq("v", 2, 3, 16, 0.2);
        for f in &mut s.frames {
            let mut noise = Rng::seed_from(7);
            for v in f.data_mut() {
                *v = noise.uniform() as f32;
            }
        }
        let a = temporal_mosaic([&s, &s, &s, &s], &mut a_rng).unwrap();
        let b = temporal_mosaic([&s, &s, &s, &s], &mut b_rng).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data(), fb.data());
        }
    }

    #[test]
    fn mosaic_rejects_mismatched_lengths() {
        let a = const_seq("a", 2, 1, 8, 0.0);
        let b = const_seq("b", 3, 1, 8, 0.0);
        let mut rng = Rng::seed_from(1);
        assert!(temporal_mosaic([&a, &b, &a, &a], &mut rng).is_err());
    }

    #[test]
    fn mosaic_uses_same_grid_for_all_frames() {
        // two frames with a bright pixel pattern; the quadrant boundary must
        // land at the same place in both frames
        let mut s = const_seq("v", 2, 1, 16, 0.0);
        for f in &mut s.frames {
            f.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let dark = const_seq("d", 2, 1, 16, 0.0);
        let mut rng = Rng::seed_from(5);
        let out = temporal_mosaic([&s, &dark, &dark, &dark], &mut rng).unwrap();
        // frame 0's bright TL quadrant must match frame 1's exactly
        assert_eq!(out.frames[0].data(), out.frames[1].data());
    }

    #[test]
    fn mixup_endpoint_keeps_first_sequence() {
        let a = const_seq("a", 2, 1, 8, 0.8);
        let mut b = const_seq("b", 2, 1, 8, 0.1);
        b.labels[1].push(NormBox::new(0.5, 0.5, 0.2, 0.2, 1).unwrap());
        let out = temporal_mixup(&a, &b, 1.0).unwrap();
        for (fa, fo) in a.frames.iter().zip(&out.frames) {
            assert_eq!(fa.data(), fo.data());
        }
        assert_eq!(out.labels[1].len(), 1, "labels remain the union");
    }

    #[test]
    fn mixup_half_blends_constants() {
        let a = const_seq("a", 2, 1, 8, 0.0);
        let b = const_seq("b", 2, 1, 8, 1.0);
        let out = temporal_mixup(&a, &b, 0.5).unwrap();
        for f in &out.frames {
            assert!(f.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        }
    }

    #[test]
    fn mixup_output_between_inputs() {
        let mut rng = Rng::seed_from(9);
        let mut a = const_seq("a", 2, 2, 8, 0.0);
        let mut b = const_seq("b", 2, 2, 8, 0.0);
        for f in a.frames.iter_mut().chain(b.frames.iter_mut()) {
            for v in f.data_mut() {
                *v = rng.uniform() as f32;
            }
        }
        let lambda = rng.uniform();
        let out = temporal_mixup(&a, &b, lambda).unwrap();
        for ti in 0..2 {
            for ((&o, &x), &y) in out.frames[ti]
                .data()
                .iter()
                .zip(a.frames[ti].data())
                .zip(b.frames[ti].data())
            {
                assert!(o >= x.min(y) - 1e-6 && o <= x.max(y) + 1e-6);
            }
        }
    }

    #[test]
    fn erase_degenerate_area_is_identity() {
        let frame = Tensor::<f32>::full(&[3, 8, 8], 0.4);
        let mut rng = Rng::seed_from(3);
        let cfg = AugmentConfig {
            erase_area_range: (0.0, 0.0),
            ..Default::default()
        };
        let out = random_erase(&frame, &mut rng, &cfg);
        assert_eq!(out.data(), frame.data());
    }

    #[test]
    fn full_frame_erase_replaces_every_pixel() {
        let frame = Tensor::<f32>::full(&[1, 8, 8], -5.0);
        let mut rng = Rng::seed_from(4);
        let out = erase_rect(&frame, (0, 0, 8, 8), &mut rng);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn erase_rect_reproducible_per_seed() {
        // frozen expected rectangle for seed 11 on a 32x32 frame
        let mut rng = Rng::seed_from(11);
        let rect = sample_erase_rect(&mut rng, (0.02, 0.2), 32, 32);
        let mut rng2 = Rng::seed_from(11);
        let rect2 = sample_erase_rect(&mut rng2, (0.02, 0.2), 32, 32);
        assert_eq!(rect, rect2);
        // golden values recorded at first implementation
        assert_eq!(rect, (15, 13, 17, 10));
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let mut rng = Rng::seed_from(5);
        let frame = Tensor::<f32>::from_fn(&[2, 8, 8], |_| rng.uniform() as f32);
        let out = random_blur(&frame, 0.0);
        assert_eq!(out.data(), frame.data());
    }

    #[test]
    fn blur_preserves_constant_frames() {
        let frame = Tensor::<f32>::full(&[3, 16, 16], 0.37);
        let out = random_blur(&frame, 1.5);
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn blur_impulse_reproduces_kernel_stamp() {
        let sigma = 1.0;
        let mut frame = Tensor::<f32>::zeros(&[1, 15, 15]);
        frame.data_mut()[7 * 15 + 7] = 1.0;
        let out = random_blur(&frame, sigma);
        // independent 2-D kernel construction
        let radius = (3.0f64 * sigma).ceil() as i64;
        let mut sum = 0.0;
        let g = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                sum += g(dy) * g(dx);
            }
        }
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let expect = g(dy) * g(dx) / sum;
                let got = out.data()[((7 + dy) * 15 + 7 + dx) as usize] as f64;
                assert!((got - expect).abs() < 1e-6, "stamp at ({dy},{dx})");
            }
        }
    }

    #[test]
    fn noise_sigma_zero_identity_and_seed_determinism() {
        let frame = Tensor::<f32>::full(&[1, 8, 8], 0.5);
        let mut rng = Rng::seed_from(6);
        let out = gaussian_noise(&frame, 0.0, &mut rng);
        assert_eq!(out.data(), frame.data());
        let mut r1 = Rng::seed_from(7);
        let mut r2 = Rng::seed_from(7);
        let a = gaussian_noise(&frame, 0.05, &mut r1);
        let b = gaussian_noise(&frame, 0.05, &mut r2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn noise_mean_is_unbiased_before_clamp() {
        // mid-gray frame: clamping at [0,1] never triggers for sigma 0.02
        let n = 1_000_000usize;
        let frame = Tensor::<f32>::full(&[1, 1000, 1000], 0.5);
        let mut rng = Rng::seed_from(8);
        let sigma = 0.02;
        let out = gaussian_noise(&frame, sigma, &mut rng);
        let mean_delta: f64 = out
            .data()
            .iter()
            .zip(frame.data())
            .map(|(&o, &i)| (o - i) as f64)
            .sum::<f64>()
            / n as f64;
        assert!(
            mean_delta.abs() < 4.0 * sigma / 1000.0,
            "mean delta {mean_delta}"
        );
    }

    #[test]
    fn transforms_preserve_shape_and_range() {
        let mut rng = Rng::seed_from(13);
        let mut seq = const_seq("v", 3, 3, 16, 0.0);
        for f in &mut seq.frames {
            for v in f.data_mut() {
                *v = rng.uniform() as f32;
            }
        }
        let cfg = AugmentConfig::default();
        let other = seq.clone();
        let mosaic = temporal_mosaic([&seq, &other, &other, &other], &mut rng).unwrap();
        let mixup = temporal_mixup(&seq, &other, 0.4).unwrap();
        for s in [&mosaic, &mixup] {
            for f in &s.frames {
                assert_eq!(f.shape(), &[3, 16, 16]);
                assert!(f
                    .data()
                    .iter()
                    .all(|&v| (-1e-6..=1.0 + 1e-6).contains(&(v as f64))));
            }
        }
        let erased = random_erase(&seq.frames[0], &mut rng, &cfg);
        let blurred = random_blur(&seq.frames[0], 1.0);
        let noisy = gaussian_noise(&seq.frames[0], cfg.noise_sigma, &mut rng);
        for f in [&erased, &blurred, &noisy] {
            assert_eq!(f.shape(), &[3, 16, 16]);
            assert!(f
                .data()
                .iter()
                .all(|&v| (-1e-6..=1.0 + 1e-6).contains(&(v as f64))));
        }
    }

    #[test]
    fn window_pipeline_same_seed_bitwise_identical() {
        let mut content = Rng::seed_from(20);
        let mut seq = const_seq("v", 3, 3, 16, 0.0);
        for f in &mut seq.frames {
            for v in f.data_mut() {
                *v = content.uniform() as f32;
            }
        }
        let others: Vec<FrameSequence> = (0..4).map(|_| seq.clone()).collect();
        let refs: Vec<&FrameSequence> = others.iter().collect();
        let cfg = AugmentConfig {
            mosaic_p: 1.0,
            mixup_p: 1.0,
            erase_p: 1.0,
            blur_p: 1.0,
            noise_p: 1.0,
            ..Default::default()
        };
        let (a, ra) = augment_window(&seq, &refs, &cfg, &mut Rng::seed_from(3)).unwrap();
        let (b, rb) = augment_window(&seq, &refs, &cfg, &mut Rng::seed_from(3)).unwrap();
        assert_eq!(ra, rb);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data(), fb.data());
        }
    }

    #[test]
    fn window_pipeline_applies_identical_geometry_to_every_frame() {
        let seq = const_seq("v", 4, 3, 16, 0.3);
        let others: Vec<FrameSequence> = (0..3).map(|_| seq.clone()).collect();
        let refs: Vec<&FrameSequence> = others.iter().collect();
        let cfg = AugmentConfig {
            mosaic_p: 1.0,
            mixup_p: 1.0,
            erase_p: 1.0,
            blur_p: 1.0,
            noise_p: 1.0,
            ..Default::default()
        };
        let (_, records) = augment_window(&seq, &refs, &cfg, &mut Rng::seed_from(8)).unwrap();
        assert_eq!(records.len(), 4);
        assert!(!records[0].is_empty());
        for r in &records[1..] {
            assert_eq!(
                r, &records[0],
                "geometric parameters must match across frames"
            );
        }
    }

    #[test]
    fn labels_stay_normalized_after_transforms() {
        let mut seq = const_seq("v", 2, 1, 32, 0.5);
        seq.labels[0].push(NormBox::new(0.3, 0.4, 0.3, 0.3, 0).unwrap());
        seq.labels[1].push(NormBox::new(0.7, 0.6, 0.4, 0.4, 1).unwrap());
        let other = seq.clone();
        let mut rng = Rng::seed_from(17);
        for _ in 0..20 {
            let out = temporal_mosaic([&seq, &other, &other, &other], &mut rng).unwrap();
            for frame_labels in &out.labels {
                for b in frame_labels {
                    assert!(b.validate().is_ok(), "box {b:?} left the unit square");
                }
            }
        }
    }
}

//! Frame-by-frame confidence analysis over a chosen frame range, plus
//! annotated-frame rendering.
//!
//! Temporal variants receive the T-1 preceding frames of the same video as
//! context for each analyzed frame; only positions before the start of the
//! video are zero-padded.

use serde::{Deserialize, Serialize};

use crate::data::window::materialize_window;
use crate::data::VideoRecord;
use crate::detector::model::Model;
use crate::detector::target::decode_predictions;
use crate::detector::train::{conform_window, stack_windows};
use crate::error::{Error, Result};
use crate::geometry::{self, nms, PixelBox};
use crate::imageio::ImageBuf;
use crate::numkit::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class_id: usize,
    pub class_name: String,
    pub confidence: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnalysisRecord {
    pub frame_index: usize,
    pub detections: Vec<DetectionRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_confidence: Option<f64>,
}

/// Inclusive "a-b" range.
pub fn parse_frame_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| Error::Usage(format!("frame range must be 'a-b', got '{s}'")))?;
    let lo: usize = a
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad frame index '{a}'")))?;
    let hi: usize = b
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad frame index '{b}'")))?;
    if lo > hi {
        return Err(Error::Usage(format!("empty frame range '{s}'")));
    }
    Ok((lo, hi))
}

/// Analyze frames `range.0..=range.1` of one video.
pub fn analyze_frames(
    model: &Model<f32>,
    video: &VideoRecord,
    range: (usize, usize),
    class_names: &[String],
) -> Result<Vec<FrameAnalysisRecord>> {
    let (lo, hi) = range;
    if hi >= video.len() {
        return Err(Error::Data(format!(
            "frame range {lo}-{hi} exceeds video '{}' ({} frames)",
            video.id,
            video.len()
        )));
    }
    let t_len = model.config.window;
    let size = model.config.image_size;
    let mut records = Vec::with_capacity(hi - lo + 1);
    for frame_index in lo..=hi {
        // window ending at this frame, zero-padded before the video start
        let pad = t_len.saturating_sub(frame_index + 1);
        let start = (frame_index + 1).saturating_sub(t_len);
        let mut seq = conform_window(
            materialize_window(video, start, frame_index + 1 - start)?,
            size,
        )?;
        for _ in 0..pad {
            seq.frames.insert(0, Tensor::zeros(&[3, size, size]));
            seq.labels.insert(0, Vec::new());
        }
        let input = stack_windows(&[seq])?;
        let raw = model.predict(&input, t_len)?;
        let dets = decode_predictions(&raw, &model.config, 0, geometry::NMS_CONF_DEFAULT)?;
        let kept = nms(&dets, geometry::NMS_IOU_DEFAULT, geometry::NMS_CONF_DEFAULT);
        let detections: Vec<DetectionRecord> = kept
            .iter()
            .map(|d| DetectionRecord {
                class_id: d.class_id,
                class_name: class_names
                    .get(d.class_id)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{}", d.class_id)),
                confidence: d.confidence,
                x1: d.x1,
                y1: d.y1,
                x2: d.x2,
                y2: d.y2,
            })
            .collect();
        let top_confidence = detections
            .iter()
            .map(|d| d.confidence)
            .fold(None, |acc: Option<f64>, c| {
                Some(acc.map_or(c, |a| a.max(c)))
            });
        records.push(FrameAnalysisRecord {
            frame_index,
            detections,
            top_confidence,
        });
    }
    Ok(records)
}

/// `frame,top_confidence` series; empty confidence when nothing was found.
pub fn confidence_csv(records: &[FrameAnalysisRecord]) -> String {
    let mut out = String::from("frame,top_confidence\n");
    for r in records {
        match r.top_confidence {
            Some(c) => out.push_str(&format!("{},{:.6}\n", r.frame_index, c)),
            None => out.push_str(&format!("{},\n", r.frame_index)),
        }
    }
    out
}

/// Deterministic class color: spaced hues at full saturation.
pub fn class_color(class_id: usize) -> [u8; 3] {
    let hue = (class_id as f64 * 0.618_033_988_749_895) % 1.0;
    let h = hue * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

// 3x5 glyphs for rendering confidences onto frames
const DIGIT_FONT: [(char, [u8; 5]); 11] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
];

fn draw_text(img: &mut ImageBuf, x: usize, y: usize, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, glyph)) = DIGIT_FONT.iter().find(|(c, _)| *c == ch) {
            for (gy, row) in glyph.iter().enumerate() {
                for gx in 0..3 {
                    if row & (0b100 >> gx) != 0 {
                        let px = cx + gx;
                        let py = y + gy;
                        if px < img.width && py < img.height {
                            img.set(px, py, color);
                        }
                    }
                }
            }
        }
        cx += 4;
        if cx >= img.width {
            break;
        }
    }
}

fn draw_rect(img: &mut ImageBuf, b: &PixelBox, color: [u8; 3]) {
    let w = img.width as i64;
    let h = img.height as i64;
    let x1 = (b.x1.round() as i64).clamp(0, w - 1);
    let y1 = (b.y1.round() as i64).clamp(0, h - 1);
    let x2 = (b.x2.round() as i64).clamp(0, w - 1);
    let y2 = (b.y2.round() as i64).clamp(0, h - 1);
    for x in x1..=x2 {
        img.set(x as usize, y1 as usize, color);
        img.set(x as usize, y2 as usize, color);
    }
    for y in y1..=y2 {
        img.set(x1 as usize, y as usize, color);
        img.set(x2 as usize, y as usize, color);
    }
}

/// Overlay boxes and confidence text on a frame.
pub fn render_annotated(frame: &Tensor<f32>, record: &FrameAnalysisRecord) -> Result<ImageBuf> {
    let mut img = ImageBuf::from_tensor(frame)?;
    for d in &record.detections {
        let color = class_color(d.class_id);
        let pb = PixelBox::new(d.x1, d.y1, d.x2, d.y2, d.class_id, d.confidence);
        draw_rect(&mut img, &pb, color);
        let label = format!("{:.2}", d.confidence);
        let ty = (d.y1.round() as i64 - 7).max(0) as usize;
        let tx = d.x1.round().max(0.0) as usize;
        draw_text(&mut img, tx, ty, &label, color);
    }
    Ok(img)
}

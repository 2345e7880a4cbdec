//! Synthetic moving-blob videos: a desk-scale stand-in for real underwater
//! footage that reproduces the scenarios the frame analyses care about —
//! gradual motion, sudden direction changes, and partial occlusion episodes
//! where ground truth keeps following the hidden object.

use std::fs;
use std::path::Path;

use crate::data::ingest::STANDARD_FRAMES;
use crate::error::{Error, Result};
use crate::geometry::NormBox;
use crate::imageio::{write_ppm, ImageBuf};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    /// Constant velocity over the whole clip.
    Gradual,
    /// Velocity re-sampled at random steps, bouncing off the frame margins.
    Sudden,
}

impl MotionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradual" => Ok(MotionKind::Gradual),
            "sudden" => Ok(MotionKind::Sudden),
            other => Err(Error::Config(format!("unknown motion kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MotionKind::Gradual => "gradual",
            MotionKind::Sudden => "sudden",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub frames: usize,
    pub size: usize,
    pub classes: usize,
    /// Occlusion episodes per video (0 disables occlusion).
    pub occlusion_episodes: usize,
    pub motion: MotionKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_videos: 8,
            frames: STANDARD_FRAMES,
            size: 128,
            classes: 2,
            occlusion_episodes: 2,
            motion: MotionKind::Sudden,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!(
                "synth size must be >= 32, got {}",
                self.size
            )));
        }
        if self.frames == 0 || self.n_videos == 0 {
            return Err(Error::Config(
                "synth needs at least one frame and one video".into(),
            ));
        }
        if self.classes == 0 || self.classes > PALETTE.len() {
            return Err(Error::Config(format!(
                "synth classes must be 1..={}, got {}",
                PALETTE.len(),
                self.classes
            )));
        }
        Ok(())
    }
}

/// Class palette: (name, bright RGB in [0,1]).
const PALETTE: [(&str, [f64; 3]); 4] = [
    ("amber", [0.95, 0.65, 0.15]),
    ("magenta", [0.90, 0.20, 0.75]),
    ("lime", [0.55, 0.95, 0.25]),
    ("coral", [0.95, 0.35, 0.30]),
];

pub fn class_names(classes: usize) -> Vec<String> {
    PALETTE[..classes]
        .iter()
        .map(|(n, _)| n.to_string())
        .collect()
}

/// One generated clip with in-memory frames.
#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub id: String,
    pub class_id: usize,
    pub class_name: String,
    pub frames: Vec<ImageBuf>,
    pub labels: Vec<Vec<NormBox>>,
    /// Per frame: is any occlusion bar active.
    pub occluded: Vec<bool>,
    /// Per frame: index (into that frame's labels) of the blob under the
    /// bar, when one is.
    pub occluded_blob: Vec<Option<usize>>,
}

struct Blob {
    class_id: usize,
    radius: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

struct Episode {
    start: usize,
    end: usize,
    blob: usize,
    /// Fraction of the blob box the bar covers, in [0.4, 0.7].
    cover: f64,
    horizontal: bool,
}

fn box_half_extent(radius: f64) -> f64 {
    2.0 * radius
}

/// Generate `cfg.n_videos` clips, fully determined by `seed`.
pub fn synth_moving_blob(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthVideo>> {
    cfg.validate()?;
    let base = Rng::seed_from(seed);
    let mut videos = Vec::with_capacity(cfg.n_videos);
    for vi in 0..cfg.n_videos {
        let mut rng = base.derive(vi as u64 + 1);
        videos.push(synth_one(cfg, vi, &mut rng)?);
    }
    Ok(videos)
}

fn synth_one(cfg: &SynthConfig, index: usize, rng: &mut Rng) -> Result<SynthVideo> {
    let s = cfg.size;
    let n_blobs = if rng.chance(0.35) { 2 } else { 1 };
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        blobs.push(init_blob(cfg, rng));
    }

    let episodes = plan_episodes(cfg, n_blobs, rng);

    // murky base color plus a static coarse texture layer
    let base_color = [
        rng.uniform_in(0.05, 0.20),
        rng.uniform_in(0.20, 0.40),
        rng.uniform_in(0.30, 0.55),
    ];
    let texture = coarse_texture(s, rng);

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut labels = Vec::with_capacity(cfg.frames);
    let mut occluded = Vec::with_capacity(cfg.frames);
    let mut occluded_blob = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        // render before moving so frame 0 shows the initial state
        let active: Vec<&Episode> = episodes
            .iter()
            .filter(|e| t >= e.start && t < e.end)
            .collect();
        frames.push(render_frame(s, &base_color, &texture, &blobs, &active, rng));
        labels.push(
            blobs
                .iter()
                .map(|b| blob_label(b, s))
                .collect::<Result<Vec<_>>>()?,
        );
        occluded.push(!active.is_empty());
        occluded_blob.push(active.first().map(|e| e.blob));
        for b in &mut blobs {
            step_blob(b, cfg, s, rng);
        }
    }

    let class_id = blobs[0].class_id;
    Ok(SynthVideo {
        id: format!("video_{index:03}"),
        class_id,
        class_name: class_names(cfg.classes)[class_id].clone(),
        frames,
        labels,
        occluded,
        occluded_blob,
    })
}

fn init_blob(cfg: &SynthConfig, rng: &mut Rng) -> Blob {
    let s = cfg.size as f64;
    let radius = rng.uniform_in(0.08, 0.13) * s;
    let margin = box_half_extent(radius) + 2.0;
    match cfg.motion {
        MotionKind::Gradual => {
            // pick a velocity small enough that the whole track stays inside
            let dir = rng.uniform_in(0.0, std::f64::consts::TAU);
            let span = (s - 2.0 * margin - 2.0).max(1.0);
            let vmax = span / cfg.frames as f64;
            let speed = rng.uniform_in(0.3, 1.0) * vmax;
            let (vx, vy) = (speed * dir.cos(), speed * dir.sin());
            let travel_x = vx * cfg.frames as f64;
            let travel_y = vy * cfg.frames as f64;
            let x_lo = margin + (-travel_x).max(0.0);
            let x_hi = s - margin - travel_x.max(0.0);
            let y_lo = margin + (-travel_y).max(0.0);
            let y_hi = s - margin - travel_y.max(0.0);
            Blob {
                class_id: rng.below(cfg.classes),
                radius,
                x: rng.uniform_in(x_lo, x_hi.max(x_lo + 1e-6)),
                y: rng.uniform_in(y_lo, y_hi.max(y_lo + 1e-6)),
                vx,
                vy,
            }
        }
        MotionKind::Sudden => {
            let dir = rng.uniform_in(0.0, std::f64::consts::TAU);
            let speed = rng.uniform_in(0.01, 0.03) * s;
            Blob {
                class_id: rng.below(cfg.classes),
                radius,
                x: rng.uniform_in(margin, s - margin),
                y: rng.uniform_in(margin, s - margin),
                vx: speed * dir.cos(),
                vy: speed * dir.sin(),
            }
        }
    }
}

fn step_blob(b: &mut Blob, cfg: &SynthConfig, size: usize, rng: &mut Rng) {
    let s = size as f64;
    let margin = box_half_extent(b.radius) + 2.0;
    if cfg.motion == MotionKind::Sudden && rng.chance(0.08) {
        let dir = rng.uniform_in(0.0, std::f64::consts::TAU);
        let speed = rng.uniform_in(0.01, 0.035) * s;
        b.vx = speed * dir.cos();
        b.vy = speed * dir.sin();
    }
    b.x += b.vx;
    b.y += b.vy;
    if cfg.motion == MotionKind::Sudden {
        if b.x < margin {
            b.x = 2.0 * margin - b.x;
            b.vx = -b.vx;
        } else if b.x > s - margin {
            b.x = 2.0 * (s - margin) - b.x;
            b.vx = -b.vx;
        }
        if b.y < margin {
            b.y = 2.0 * margin - b.y;
            b.vy = -b.vy;
        } else if b.y > s - margin {
            b.y = 2.0 * (s - margin) - b.y;
            b.vy = -b.vy;
        }
    }
}

fn plan_episodes(cfg: &SynthConfig, n_blobs: usize, rng: &mut Rng) -> Vec<Episode> {
    let mut episodes = Vec::new();
    if cfg.frames < 12 {
        return episodes;
    }
    for _ in 0..cfg.occlusion_episodes {
        let duration = rng.range_inclusive(3, 8);
        let start = rng.range_inclusive(3, cfg.frames - duration - 1);
        episodes.push(Episode {
            start,
            end: start + duration,
            blob: rng.below(n_blobs),
            cover: rng.uniform_in(0.4, 0.7),
            horizontal: rng.chance(0.5),
        });
    }
    episodes
}

fn blob_label(b: &Blob, size: usize) -> Result<NormBox> {
    let s = size as f64;
    let half = box_half_extent(b.radius);
    NormBox::new(
        (b.x / s).clamp(0.0, 1.0),
        (b.y / s).clamp(0.0, 1.0),
        (2.0 * half / s).min(1.0),
        (2.0 * half / s).min(1.0),
        b.class_id,
    )
}

fn coarse_texture(size: usize, rng: &mut Rng) -> Vec<f64> {
    // low-frequency grid upsampled bilinearly
    let grid = (size / 16).max(2);
    let mut coarse = vec![0.0f64; grid * grid];
    for v in &mut coarse {
        *v = rng.uniform_in(-0.06, 0.06);
    }
    let mut tex = vec![0.0f64; size * size];
    for y in 0..size {
        let fy = y as f64 / size as f64 * (grid - 1) as f64;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(grid - 1);
        let wy = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 / size as f64 * (grid - 1) as f64;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(grid - 1);
            let wx = fx - x0 as f64;
            let top = coarse[y0 * grid + x0] * (1.0 - wx) + coarse[y0 * grid + x1] * wx;
            let bot = coarse[y1 * grid + x0] * (1.0 - wx) + coarse[y1 * grid + x1] * wx;
            tex[y * size + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    tex
}

fn render_frame(
    size: usize,
    base: &[f64; 3],
    texture: &[f64],
    blobs: &[Blob],
    active: &[&Episode],
    rng: &mut Rng,
) -> ImageBuf {
    let mut img = ImageBuf::new(size, size);
    let mut pix = vec![0.0f64; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let t = texture[y * size + x] + rng.uniform_in(-0.015, 0.015);
            for c in 0..3 {
                pix[(y * size + x) * 3 + c] = (base[c] + t).clamp(0.0, 1.0);
            }
        }
    }
    for b in blobs {
        let color = PALETTE[b.class_id].1;
        let reach = (3.0 * b.radius).ceil() as i64;
        let (bx, by) = (b.x, b.y);
        let x_lo = ((bx as i64) - reach).max(0) as usize;
        let x_hi = (((bx as i64) + reach) as usize).min(size - 1);
        let y_lo = ((by as i64) - reach).max(0) as usize;
        let y_hi = (((by as i64) + reach) as usize).min(size - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 - bx;
                let dy = y as f64 - by;
                let alpha = (-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius)).exp() * 0.95;
                if alpha > 0.01 {
                    for c in 0..3 {
                        let i = (y * size + x) * 3 + c;
                        pix[i] = pix[i] * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }
    for e in active {
        let b = &blobs[e.blob];
        let half = box_half_extent(b.radius);
        let thickness = (e.cover * 2.0 * half).round().max(1.0) as usize;
        let bar_color = [0.04f64, 0.05, 0.07];
        if e.horizontal {
            let y0 = (b.y - thickness as f64 / 2.0).round().max(0.0) as usize;
            let y1 = (y0 + thickness).min(size);
            for y in y0..y1 {
                for x in 0..size {
                    for c in 0..3 {
                        pix[(y * size + x) * 3 + c] =
                            (bar_color[c] + rng.uniform_in(-0.01, 0.01)).clamp(0.0, 1.0);
                    }
                }
            }
        } else {
            let x0 = (b.x - thickness as f64 / 2.0).round().max(0.0) as usize;
            let x1 = (x0 + thickness).min(size);
            for y in 0..size {
                for x in x0..x1 {
                    for c in 0..3 {
                        pix[(y * size + x) * 3 + c] =
                            (bar_color[c] + rng.uniform_in(-0.01, 0.01)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    for (i, v) in pix.iter().enumerate() {
        img.data[i] = (v * 255.0).round() as u8;
    }
    img
}

/// Write clips in the ingestion layout, plus an `occluded.txt` per video
/// listing occluded frame indices (ignored by ingestion, used by analyses).
pub fn write_dataset(videos: &[SynthVideo], classes: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("classes.txt"), classes.join("\n") + "\n")?;
    for v in videos {
        let vdir = dir.join(&v.id);
        let ldir = vdir.join("labels");
        fs::create_dir_all(&ldir)?;
        for (fi, frame) in v.frames.iter().enumerate() {
            write_ppm(&vdir.join(format!("img_{fi:05}.ppm")), frame)?;
            let lines: String = v.labels[fi]
                .iter()
                .map(|b| crate::geometry::format_label_line(b) + "\n")
                .collect();
            fs::write(ldir.join(format!("img_{fi:05}.txt")), lines)?;
        }
        let occ: String = v
            .occluded
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(i, _)| format!("{i}\n"))
            .collect();
        fs::write(vdir.join("occluded.txt"), occ)?;
    }
    Ok(())
}

/// Occluded frame indices recorded by [`write_dataset`].
pub fn read_occluded(video_dir: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(video_dir.join("occluded.txt")).map_err(|e| {
        Error::Data(format!(
            "no occlusion record in {}: {e}",
            video_dir.display()
        ))
    })?;
    text.lines()
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad occluded.txt line '{l}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{norm_to_pixel, pixel_to_norm};

    fn small_cfg(motion: MotionKind, occ: usize) -> SynthConfig {
        SynthConfig {
            n_videos: 2,
            frames: 24,
            size: 64,
            classes: 2,
            occlusion_episodes: occ,
            motion,
        }
    }

    #[test]
    fn gradual_motion_is_an_exact_line() {
        let cfg = small_cfg(MotionKind::Gradual, 0);
        let videos = synth_moving_blob(&cfg, 5).unwrap();
        for v in &videos {
            let centers: Vec<(f64, f64)> = v
                .labels
                .iter()
                .map(|l| (l[0].cx * 64.0, l[0].cy * 64.0))
                .collect();
            let n = centers.len();
            let (x0, y0) = centers[0];
            let (x1, y1) = centers[n - 1];
            for (i, &(x, y)) in centers.iter().enumerate() {
                let f = i as f64 / (n - 1) as f64;
                let ex = x0 + f * (x1 - x0);
                let ey = y0 + f * (y1 - y0);
                assert!(
                    (x - ex).abs() < 0.5 && (y - ey).abs() < 0.5,
                    "frame {i}: ({x},{y}) vs line ({ex},{ey})"
                );
            }
        }
    }

    #[test]
    fn same_seed_identical_pixels() {
        let cfg = small_cfg(MotionKind::Sudden, 1);
        let a = synth_moving_blob(&cfg, 31).unwrap();
        let b = synth_moving_blob(&cfg, 31).unwrap();
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!(va.occluded, vb.occluded);
            for (fa, fb) in va.frames.iter().zip(&vb.frames) {
                assert_eq!(fa.data, fb.data);
            }
        }
    }

    #[test]
    fn labels_valid_and_round_trip() {
        let cfg = small_cfg(MotionKind::Sudden, 2);
        let videos = synth_moving_blob(&cfg, 9).unwrap();
        for v in &videos {
            assert_eq!(v.labels.len(), v.frames.len());
            for frame_labels in &v.labels {
                assert!(!frame_labels.is_empty());
                for b in frame_labels {
                    b.validate().unwrap();
                    let (p, _) = norm_to_pixel(b, 64, 64);
                    let back = pixel_to_norm(&p, 64, 64);
                    assert!((back.cx - b.cx).abs() < 1e-9);
                    assert!((back.w - b.w).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn occlusion_flags_line_up_with_episodes() {
        let cfg = small_cfg(MotionKind::Sudden, 2);
        let videos = synth_moving_blob(&cfg, 13).unwrap();
        let any_occluded = videos.iter().any(|v| v.occluded.iter().any(|&o| o));
        assert!(any_occluded, "occlusion episodes were requested");
        let cfg0 = small_cfg(MotionKind::Sudden, 0);
        let clean = synth_moving_blob(&cfg0, 13).unwrap();
        assert!(clean.iter().all(|v| v.occluded.iter().all(|&o| !o)));
    }

    #[test]
    fn dataset_round_trips_through_ingest() {
        let cfg = small_cfg(MotionKind::Sudden, 1);
        let videos = synth_moving_blob(&cfg, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&videos, &class_names(cfg.classes), dir.path()).unwrap();
        let records = crate::data::ingest(dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        for (r, v) in records.iter().zip(&videos) {
            assert_eq!(r.len(), v.frames.len());
            assert_eq!(r.id, v.id);
            for (got, want) in r.labels.iter().zip(&v.labels) {
                assert_eq!(got.len(), want.len());
            }
        }
        let occ = read_occluded(&dir.path().join(&videos[0].id)).unwrap();
        let expect: Vec<usize> = videos[0]
            .occluded
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(occ, expect);
    }
}

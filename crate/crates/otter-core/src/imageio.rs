//! 8-bit RGB image buffers with binary PPM (P6) on disk.
//!
//! PPM keeps frame files byte-stable across runs and platforms, which the
//! determinism contracts depend on.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::tensor::Tensor;

pub const IMAGE_EXT: &str = "ppm";

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// To a [3, H, W] tensor scaled into [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = (self.width, self.height);
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            let plane = &mut t.data_mut()[c * h * w..][..h * w];
            for (i, v) in plane.iter_mut().enumerate() {
                *v = self.data[i * 3 + c] as f32 / 255.0;
            }
        }
        t
    }

    /// From a [3, H, W] tensor in [0, 1]; values clamp and round.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [c, h, w] = t.shape() else {
            return Err(Error::shape(
                "ImageBuf::from_tensor",
                format!("expected [3,H,W], got {:?}", t.shape()),
            ));
        };
        if *c != 3 {
            return Err(Error::shape(
                "ImageBuf::from_tensor",
                format!("expected 3 channels, got {c}"),
            ));
        }
        let (h, w) = (*h, *w);
        let mut img = ImageBuf::new(w, h);
        for ci in 0..3 {
            let plane = &t.data()[ci * h * w..][..h * w];
            for (i, &v) in plane.iter().enumerate() {
                img.data[i * 3 + ci] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(img)
    }
}

pub fn write_ppm(path: &Path, img: &ImageBuf) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageBuf> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("unreadable image {}: {e}", path.display())))?;
    parse_ppm(&bytes).map_err(|msg| Error::Data(format!("bad image {}: {msg}", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<ImageBuf, String> {
    let mut cursor = 0usize;
    let mut next_token = |bytes: &[u8]| -> std::result::Result<String, String> {
        // skip whitespace and comments
        loop {
            while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
                cursor += 1;
            }
            if cursor < bytes.len() && bytes[cursor] == b'#' {
                while cursor < bytes.len() && bytes[cursor] != b'\n' {
                    cursor += 1;
                }
            } else {
                break;
            }
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..cursor]).into_owned())
    };

    if next_token(bytes)? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let width: usize = next_token(bytes)?.parse().map_err(|_| "bad width")?;
    let height: usize = next_token(bytes)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = next_token(bytes)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // single whitespace byte after maxval
    cursor += 1;
    let need = width * height * 3;
    if bytes.len() < cursor + need {
        return Err(format!(
            "pixel payload truncated: need {need}, have {}",
            bytes.len().saturating_sub(cursor)
        ));
    }
    Ok(ImageBuf {
        width,
        height,
        data: bytes[cursor..cursor + need].to_vec(),
    })
}

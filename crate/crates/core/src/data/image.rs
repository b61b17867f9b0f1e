//! Binary PGM (P5) and PPM (P6) rasters, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale raster with samples in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    /// All-black raster.
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Paints the half-open rectangle `[x0, x1) x [y0, y1)`, clipped to the raster.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, value: f32) {
        let cx = |v: i64| v.clamp(0, self.width as i64) as usize;
        let cy = |v: i64| v.clamp(0, self.height as i64) as usize;
        let (x0, x1, y0, y1) = (cx(x0), cx(x1), cy(y0), cy(y1));
        for y in y0..y1 {
            self.pixels[y * self.width + x0..y * self.width + x1].fill(value);
        }
    }
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads one header integer, skipping whitespace and `#` comments.
fn header_int(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(bad(path, format!("header ends before {what}"))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(path, format!("malformed {what}")))
}

/// Decodes P5 or P6 bytes; colour is reduced to luma `0.299R + 0.587G + 0.114B`.
pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad(path, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let width = header_int(bytes, &mut pos, path, "width")?;
    let height = header_int(bytes, &mut pos, path, "height")?;
    let maxval = header_int(bytes, &mut pos, path, "maxval")?;
    if maxval != 255 {
        return Err(bad(path, format!("only 8-bit rasters are supported, maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(path, "missing separator after header"));
    }
    pos += 1;
    let need = width * height * channels;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad(path, format!("truncated payload: need {need} bytes, have {}", bytes.len() - pos)))?;
    let pixels = if channels == 1 {
        payload.iter().map(|&v| v as f32 / 255.0).collect()
    } else {
        payload
            .chunks_exact(3)
            .map(|p| ((0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0) as f32)
            .collect()
    };
    Ok(GrayImage { width, height, pixels })
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| bad(path, e.to_string()))?;
    parse_pnm(&bytes, path)
}

/// P5 encoding; samples are rounded to the nearest 8-bit level.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn save_pgm(image: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

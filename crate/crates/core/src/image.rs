//! Minimal raster types with binary PPM (P6) / PGM (P5) I/O and the
//! BT.601 full-range YCbCr conversion used throughout.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed image: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn ycbcr(&self, x: usize, y: usize) -> [f64; 3] {
        rgb_to_ycbcr(self.get(x, y))
    }

    /// Bilinearly interpolated YCbCr at a continuous pixel position, or
    /// `None` outside the image.
    pub fn ycbcr_bilinear(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let mut out = [0.0; 3];
        let corners = [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x1, y0, fx * (1.0 - fy)), (x0, y1, (1.0 - fx) * fy), (x1, y1, fx * fy)];
        for (x, y, w) in corners {
            let c = self.ycbcr(x, y);
            for k in 0..3 {
                out[k] += w * c[k];
            }
        }
        Some(out)
    }

    pub fn luminance(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect()
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Self, ImageError> {
        let mut r = BufReader::new(r);
        let (width, height) = read_header(&mut r, "P6")?;
        let mut data = vec![0; width * height * 3];
        r.read_exact(&mut data)?;
        Ok(Self { width, height, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn read_pgm<R: Read>(r: R) -> Result<Self, ImageError> {
        let mut r = BufReader::new(r);
        let (width, height) = read_header(&mut r, "P5")?;
        let mut data = vec![0; width * height];
        r.read_exact(&mut data)?;
        Ok(Self { width, height, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let f = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(f))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        Self::read_pgm(std::fs::File::open(path)?)
    }
}

fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<(usize, usize), ImageError> {
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        let mut tok = Vec::new();
        loop {
            let mut b = [0u8];
            if r.read(&mut b)? == 0 {
                return Err(ImageError::Format("truncated header".into()));
            }
            match b[0] {
                b'#' if tok.is_empty() => {
                    let mut skip = Vec::new();
                    r.read_until(b'\n', &mut skip)?;
                }
                c if c.is_ascii_whitespace() => {
                    if !tok.is_empty() {
                        break;
                    }
                }
                c => tok.push(c),
            }
        }
        tokens.push(String::from_utf8_lossy(&tok).into_owned());
    }
    if tokens[0] != magic {
        return Err(ImageError::Format(format!("expected {magic}, found {}", tokens[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Format(format!("bad header field {s:?}")));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(ImageError::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    Ok((w, h))
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// BT.601 full-range RGB to YCbCr.
#[inline]
pub fn rgb_to_ycbcr(p: [u8; 3]) -> [f64; 3] {
    let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b,
    ]
}

/// Inverse of [`rgb_to_ycbcr`], clamped to u8.
pub fn ycbcr_to_rgb(c: [f64; 3]) -> [u8; 3] {
    let (y, cb, cr) = (c[0], c[1] - 128.0, c[2] - 128.0);
    let r = y + 1.402 * cr;
    let g = y - 0.344136 * cb - 0.714136 * cr;
    let b = y + 1.772 * cb;
    [clamp_u8(r), clamp_u8(g), clamp_u8(b)]
}

pub fn clamp_u8(x: f64) -> u8 {
    x.round().clamp(0.0, 255.0) as u8
}

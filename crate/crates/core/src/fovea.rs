//! Space-variant resampling: a regular output grid is pushed through
//! `(u, v) -> ln(sqrt(u^2 + v^2) + 1) * (u, v)` and the source image is read
//! bilinearly at the warped positions. The centre is magnified, the periphery
//! compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::{CoreError, Result};

/// Planar float image, values in `[0, 1]`, layout `[channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Append a channel (e.g. a binary mask) of matching size.
    pub fn push_channel(&mut self, plane: &[f32]) -> Result<()> {
        if plane.len() != self.height * self.width {
            return Err(CoreError::Shape(format!(
                "channel of {} values does not fit {}x{} image",
                plane.len(),
                self.height,
                self.width
            )));
        }
        self.data.extend_from_slice(plane);
        self.channels += 1;
        Ok(())
    }

    /// Threshold one channel at 0.5 so it is strictly binary again after resampling.
    pub fn binarize_channel(&mut self, c: usize) {
        let n = self.height * self.width;
        for v in &mut self.data[c * n..(c + 1) * n] {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
    }

    /// Rotate by 90 degrees counter-clockwise (as displayed, rows top to bottom).
    pub fn rotate90(&self) -> Image {
        let mut out = Image::new(self.width, self.height, self.channels);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, self.width - 1 - x, y, self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, self.width - 1 - x, self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Image {
        assert_eq!(bytes.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Write the first three channels (or one, for grey images) as an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (color, planes) = match self.channels {
            1 => (png::ColorType::Grayscale, 1),
            c if c >= 3 => (png::ColorType::Rgb, 3),
            c => return Err(CoreError::Shape(format!("cannot write {c}-channel image as PNG"))),
        };
        let mut buf = Vec::with_capacity(self.height * self.width * planes);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..planes {
                    buf.push(quantize(self.get(c, y, x)));
                }
            }
        }
        write_png(path.as_ref(), self.width, self.height, color, &buf)
    }

    /// Read an 8-bit PNG as RGB (grey is replicated, alpha dropped).
    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let file = File::open(path.as_ref())?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(png_err)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| CoreError::Format("PNG too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let stride = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(CoreError::Format("indexed PNG not expanded".into()))
            }
        };
        let mut img = Image::new(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                let p = &buf[y * info.line_size + x * stride..];
                for c in 0..3 {
                    let b = if stride < 3 { p[0] } else { p[c] };
                    img.set(c, y, x, b as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_err(e: impl std::fmt::Display) -> CoreError {
    CoreError::Format(format!("png: {e}"))
}

pub(crate) fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// The warp itself. Total on `[-1, 1]^2`; the image of that square is
/// `[-ln(1 + sqrt 2), ln(1 + sqrt 2)]^2`, so no clamping is ever needed.
#[inline]
pub fn warp(u: f64, v: f64) -> (f64, f64) {
    let s = ((u * u + v * v).sqrt() + 1.0).ln();
    (s * u, s * v)
}

/// `ln(1 + sqrt 2)`, the warped image of a corner coordinate.
pub const WARP_MAX: f64 = 0.881_373_587_019_543;

/// Normalised coordinate of pixel centre `i` on an `n`-pixel axis.
#[inline]
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

/// Source sampling positions for every output pixel, row-major, as `(u', v')`
/// with `u` along columns and `v` along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGrid {
    pub out_size: usize,
    pub coords: Vec<(f64, f64)>,
}

pub fn build_grid(out_size: usize) -> Result<WarpGrid> {
    grid_with(out_size, warp)
}

/// Identity mapping: a plain bilinear downsample (the no-log-polar ablation).
pub fn build_uniform_grid(out_size: usize) -> Result<WarpGrid> {
    grid_with(out_size, |u, v| (u, v))
}

fn grid_with(out_size: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> Result<WarpGrid> {
    if out_size < 2 {
        return Err(CoreError::Config(format!("warp grid size must be >= 2, got {out_size}")));
    }
    let mut coords = Vec::with_capacity(out_size * out_size);
    for row in 0..out_size {
        let v = pixel_center(row, out_size);
        for col in 0..out_size {
            coords.push(f(pixel_center(col, out_size), v));
        }
    }
    Ok(WarpGrid { out_size, coords })
}

/// Bilinear read at every grid coordinate. Borders replicate the edge pixel
/// (only the outer half-pixel ring can touch them).
pub fn sample(src: &Image, grid: &WarpGrid) -> Image {
    assert!(src.height >= 2 && src.width >= 2, "source must be at least 2x2");
    let n = grid.out_size;
    let mut out = Image::new(n, n, src.channels);
    let (w, h) = (src.width as f64, src.height as f64);
    for (k, &(u, v)) in grid.coords.iter().enumerate() {
        let x = (u + 1.0) * 0.5 * w - 0.5;
        let y = (v + 1.0) * 0.5 * h - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let xi = |d: f64| ((x0 + d).max(0.0) as usize).min(src.width - 1);
        let yi = |d: f64| ((y0 + d).max(0.0) as usize).min(src.height - 1);
        let (xa, xb, ya, yb) = (xi(0.0), xi(1.0), yi(0.0), yi(1.0));
        for c in 0..src.channels {
            let top = src.get(c, ya, xa) * (1.0 - fx) + src.get(c, ya, xb) * fx;
            let bot = src.get(c, yb, xa) * (1.0 - fx) + src.get(c, yb, xb) * fx;
            out.data[c * n * n + k] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warp_reference_points() {
        assert_eq!(warp(0.0, 0.0), (0.0, 0.0));
        let (a, b) = warp(1.0, 0.0);
        assert!((a - 2f64.ln()).abs() < 1e-12 && b == 0.0);
        let (a, b) = warp(1.0, 1.0);
        assert!((a - WARP_MAX).abs() < 1e-12 && (b - WARP_MAX).abs() < 1e-12);
    }

    #[test]
    fn tiny_grid_rejected() {
        assert!(build_grid(1).is_err());
        assert!(build_grid(2).is_ok());
    }

    #[test]
    fn odd_symmetry_of_grid() {
        let g = build_grid(64).unwrap();
        let n = g.coords.len();
        for k in 0..n {
            let (a, b) = g.coords[k];
            let (c, d) = g.coords[n - 1 - k];
            assert_eq!((a, b), (-c, -d));
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let src = Image::filled(17, 17, 3, 0.37);
        let out = sample(&src, &build_grid(8).unwrap());
        assert!(out.data.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn centre_pixel_preserved() {
        // odd sizes put a pixel centre exactly on the optical axis
        let mut src = Image::new(9, 9, 1);
        for (i, v) in src.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).fract();
        }
        let out = sample(&src, &build_grid(5).unwrap());
        assert_eq!(out.get(0, 2, 2), src.get(0, 4, 4));
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut img = Image::new(3, 4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 6.0;
        }
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!((back.height, back.width, back.channels), (3, 4, 3));
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

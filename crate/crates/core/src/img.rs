//! In-memory RGB and depth images with on-disk codecs.
//!
//! RGB stores f64 in [0,1], row-major, 3 channels. Depth stores meters with
//! 0.0 as the "no surface" sentinel; the disk format is raw little-endian
//! f32, row-major.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    /// height * width * 3, row-major.
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Clamp-to-edge bilinear sample at continuous coordinates.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let (taps, _) = self.bilinear_taps(x, y);
        let mut out = [0.0; 3];
        for (px, py, w) in taps {
            let p = self.pixel(px, py);
            for c in 0..3 {
                out[c] += w * p[c];
            }
        }
        out
    }

    /// Bilinear sample plus its gradient with respect to (x, y).
    pub fn sample_bilinear_with_grad(&self, x: f64, y: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let xc = x.clamp(0.0, self.width as f64 - 1.0);
        let yc = y.clamp(0.0, self.height as f64 - 1.0);
        let x0 = (xc.floor() as usize).min(self.width - 1);
        let y0 = (yc.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut val = [0.0; 3];
        let mut dx = [0.0; 3];
        let mut dy = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            val[c] = top * (1.0 - fy) + bot * fy;
            dx[c] = (p10[c] - p00[c]) * (1.0 - fy) + (p11[c] - p01[c]) * fy;
            dy[c] = bot - top;
        }
        // The clamp zeroes the gradient outside the image.
        if x != xc {
            dx = [0.0; 3];
        }
        if y != yc {
            dy = [0.0; 3];
        }
        (val, dx, dy)
    }

    fn bilinear_taps(&self, x: f64, y: f64) -> ([(usize, usize, f64); 4], (f64, f64)) {
        let xc = x.clamp(0.0, self.width as f64 - 1.0);
        let yc = y.clamp(0.0, self.height as f64 - 1.0);
        let x0 = (xc.floor() as usize).min(self.width - 1);
        let y0 = (yc.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        (
            [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ],
            (fx, fy),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len());
        for v in &self.data {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size matches dimensions");
        img.save(path)
            .map_err(|e| Error::FileFormat {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<ImageBuf> {
        let img = image::open(path)
            .map_err(|e| Error::FileFormat {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Ok(ImageBuf {
            width: w,
            height: h,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Meters; 0.0 means no surface along that pixel's ray.
    pub data: Vec<f64>,
}

impl DepthMap {
    pub const NONE: f64 = 0.0;

    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![Self::NONE; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn save_bin(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_bin(path: &Path, width: usize, height: usize) -> Result<DepthMap> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() != width * height * 4 {
            return Err(Error::FileFormat {
                path: path.to_path_buf(),
                message: format!(
                    "expected {} bytes for {width}x{height} f32 depth, got {}",
                    width * height * 4,
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    /// 16-bit millimeter PNG; 0 encodes invalid. Depths beyond u16 range saturate.
    pub fn save_png_mm(&self, path: &Path) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for (x, y, p) in img.enumerate_pixels_mut() {
            let d = self.get(x as usize, y as usize);
            let mm = if d > 0.0 {
                (d * 1000.0).round().clamp(1.0, 65535.0) as u16
            } else {
                0
            };
            *p = image::Luma([mm]);
        }
        img.save(path).map_err(|e| Error::FileFormat {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

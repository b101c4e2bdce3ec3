//! RGB intensity images in `[0, 1]` and their PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `height x width x 3`, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Channel-averaged intensity, `height x width`.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    /// Bilinear sample at continuous coordinates (pixel centres at integers);
    /// `None` outside the pixel-centre hull.
    pub fn sample(&self, y: f64, x: f64) -> Option<[f64; 3]> {
        let (h, w) = (self.height as f64, self.width as f64);
        if !(y >= 0.0 && x >= 0.0 && y <= h - 1.0 && x <= w - 1.0) {
            return None;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
            let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
        Some(out)
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = p[c];
            }
        }
        Tensor::from_vec(&[1, 3, self.height, self.width], out).expect("shape matches")
    }

    /// Writes an RGB PNG at 8 or 16 bits per channel. Values are clipped.
    pub fn save_png(&self, path: &Path, bit_depth: u8) -> Result<()> {
        let levels = match bit_depth {
            8 => 255.0,
            16 => 65535.0,
            other => {
                return Err(Error::Config(format!(
                    "PNG bit depth must be 8 or 16, got {other}"
                )))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        let mut bytes = Vec::with_capacity(self.data.len() * (bit_depth as usize / 8));
        if bit_depth == 8 {
            enc.set_depth(png::BitDepth::Eight);
            bytes.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * levels).round() as u8));
        } else {
            enc.set_depth(png::BitDepth::Sixteen);
            for v in &self.data {
                let q = (v.clamp(0.0, 1.0) * levels).round() as u16;
                bytes.extend_from_slice(&q.to_be_bytes());
            }
        }
        let write = || -> std::result::Result<(), png::EncodingError> {
            let mut w = enc.write_header()?;
            w.write_image_data(&bytes)?;
            w.finish()
        };
        write().map_err(|e| Error::format(path, &e.to_string()))
    }

    /// Reads an 8- or 16-bit RGB or grayscale PNG into `[0, 1]` intensities.
    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: &dyn std::fmt::Display| Error::format(path, &e.to_string());
        let mut reader = png::Decoder::new(BufReader::new(file))
            .read_info()
            .map_err(|e| bad(&e))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| bad(&"image too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(&e))?;
        buf.truncate(info.buffer_size());
        let (h, w) = (info.height as usize, info.width as usize);
        let values: Vec<f64> = match info.bit_depth {
            png::BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
            png::BitDepth::Sixteen => buf
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
                .collect(),
            other => return Err(bad(&format!("unsupported bit depth {other:?}"))),
        };
        let data = match info.color_type {
            png::ColorType::Rgb => values,
            png::ColorType::Grayscale => values.iter().flat_map(|&v| [v, v, v]).collect(),
            other => return Err(bad(&format!("unsupported colour type {other:?}"))),
        };
        Image::from_vec(h, w, data)
    }
}

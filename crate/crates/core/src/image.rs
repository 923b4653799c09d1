//! Float image type and PNG I/O.
//!
//! [`ImageTensor`] is the currency of every pipeline stage: a 3-channel
//! CHW grid of `f64` values in `[-1, 1]`.

use std::path::Path;

use crate::error::{Error, Result};

/// RGB image, channel-major (`[3, h, w]`), values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl ImageTensor {
    /// Builds an image from CHW data, validating range and finiteness.
    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be nonzero".into()));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for 3x{}x{}, got {}",
                CHANNELS * height * width,
                height,
                width,
                data.len()
            )));
        }
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite pixel value".into()));
            }
            if v.abs() > 1.0 + 1e-9 {
                return Err(Error::Numeric(format!("pixel value {v} outside [-1, 1]")));
            }
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn splat(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_data(height, width, vec![value; CHANNELS * height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_data(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, self.height, self.width]
    }

    /// Mean over all channels and pixels.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Per-channel means.
    pub fn channel_means(&self) -> [f64; 3] {
        let hw = self.height * self.width;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        out
    }

    /// Bilinear resize with pixel-center sampling. A no-op when the target
    /// size equals the current size.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("resize target must be nonzero".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let ty = fy - y0 as f64;
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let tx = fx - x0 as f64;
                    let p00 = self.get(c, y0, x0);
                    let p01 = self.get(c, y0, x1);
                    let p10 = self.get(c, y1, x0);
                    let p11 = self.get(c, y1, x1);
                    let top = p00 + (p01 - p00) * tx;
                    let bot = p10 + (p11 - p10) * tx;
                    data.push(top + (bot - top) * ty);
                }
            }
        }
        Self::from_data(height, width, data)
    }

    /// Pads height/width up to the next multiple of `q` by edge replication.
    pub fn pad_to_multiple(&self, q: usize) -> Result<Self> {
        let nh = self.height.div_ceil(q) * q;
        let nw = self.width.div_ceil(q) * q;
        if nh == self.height && nw == self.width {
            return Ok(self.clone());
        }
        Self::from_fn(nh, nw, |c, y, x| {
            self.get(c, y.min(self.height - 1), x.min(self.width - 1))
        })
    }

    /// Top-left crop.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::Bounds("crop larger than image".into()));
        }
        Self::from_fn(height, width, |c, y, x| self.get(c, y, x))
    }

    /// Encodes to 8-bit RGB and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.height * self.width * 3);
        let hw = self.height * self.width;
        for i in 0..hw {
            for c in 0..CHANNELS {
                let v = ((self.data[c * hw + i] + 1.0) * 127.5).round().clamp(0.0, 255.0);
                buf.push(v as u8);
            }
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .ok_or_else(|| Error::Shape("pixel buffer size mismatch".into()))?;
        img.save(path)
            .map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))
    }
}

/// Loads an RGB raster, resizes it to `resolution` square, and maps 8-bit
/// values onto `[-1, 1]` (0 -> -1, 255 -> +1).
pub fn load_image(path: &Path, resolution: usize) -> Result<ImageTensor> {
    let img = decode_rgb(path)?;
    img.resize(resolution, resolution)
}

/// Loads an RGB raster at its native size.
pub fn load_image_native(path: &Path) -> Result<ImageTensor> {
    decode_rgb(path)
}

fn decode_rgb(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::open(path)
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    let rgb = match dynimg {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::Channel(format!(
                "{}: expected 3-channel RGB, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = raw[i * 3 + c] as f64 / 127.5 - 1.0;
        }
    }
    ImageTensor::from_data(h, w, data)
}

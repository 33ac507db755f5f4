//! Planar float images and batches.

use std::path::Path;

use crate::error::{input_err, shape_err, Error, Result};

/// A `channels × height × width` image with planar (CHW) float storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Axis-aligned crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: width as f64,
            h: height as f64,
        }
    }
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Replicates a single-channel image to `channels` identical planes.
    pub fn replicate(&self, channels: usize) -> Result<Self> {
        if self.channels != 1 {
            return Err(input_err!("only single-channel images can be replicated"));
        }
        let mut data = Vec::with_capacity(channels * self.data.len());
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Self::new(channels, self.height, self.width, data)
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_moments(&self) -> Vec<(f64, f64)> {
        (0..self.channels)
            .map(|c| {
                let p = self.plane(c);
                let n = p.len() as f64;
                let mean = p.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// Mean over all pixels of each channel.
    pub fn channel_means(&self) -> Vec<f64> {
        self.channel_moments().into_iter().map(|(m, _)| m).collect()
    }

    /// Bilinear resample of `rect` to `out_h × out_w` (half-pixel centers),
    /// optionally mirrored horizontally.
    pub fn resample(&self, rect: Rect, out_h: usize, out_w: usize, flip: bool) -> Self {
        let sx = rect.w / out_w as f64;
        let sy = rect.h / out_h as f64;
        let taps = |dst: usize, scale: f64, origin: f64, limit: usize| {
            let src = origin + (dst as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (limit - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(limit - 1);
            let f = (src - i0 as f64) as f32;
            (i0, i1, f)
        };
        let xs: Vec<_> = (0..out_w)
            .map(|x| {
                let dx = if flip { out_w - 1 - x } else { x };
                taps(dx, sx, rect.x, self.width)
            })
            .collect();
        let ys: Vec<_> = (0..out_h).map(|y| taps(y, sy, rect.y, self.height)).collect();
        let mut out = Image::zeros(self.channels, out_h, out_w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let a = src[y0 * self.width + x0];
                    let b = src[y0 * self.width + x1];
                    let cc = src[y1 * self.width + x0];
                    let d = src[y1 * self.width + x1];
                    let top = a + (b - a) * fx;
                    let bot = cc + (d - cc) * fx;
                    dst[oy * out_w + ox] = top + (bot - top) * fy;
                }
            }
        }
        out
    }

    /// Writes an 8-bit PNG: RGB for three channels, grayscale for one.
    /// Values are clamped to `[0,1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let err = |source| Error::Image {
            path: path.to_path_buf(),
            source,
        };
        match self.channels {
            3 => {
                let mut buf = Vec::with_capacity(3 * h * w);
                for i in 0..h * w {
                    for c in 0..3 {
                        buf.push(quant(self.data[c * h * w + i]));
                    }
                }
                let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
                img.save_with_format(path, image::ImageFormat::Png).map_err(err)
            }
            1 => {
                let buf = self.data.iter().map(|&v| quant(v)).collect();
                let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
                img.save_with_format(path, image::ImageFormat::Png).map_err(err)
            }
            c => Err(shape_err!("cannot write a {c}-channel image as PNG")),
        }
    }

    /// Reads any image file as a 3-channel image scaled to `[0,1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let decoded = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, px) in decoded.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(3, h, w, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A stack of equally sized images in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    len: usize,
    channels: usize,
    size: usize,
    data: Vec<f32>,
}

impl ImageBatch {
    /// Stacks square images of identical shape.
    pub fn stack<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut it = images.into_iter().peekable();
        let first = it
            .peek()
            .ok_or_else(|| input_err!("cannot stack an empty image list"))?;
        let (channels, size) = (first.channels, first.height);
        let mut data = Vec::new();
        let mut len = 0;
        for img in it {
            if img.channels != channels || img.height != size || img.width != size {
                return Err(shape_err!(
                    "batch expects {channels}x{size}x{size} images, got {}x{}x{}",
                    img.channels,
                    img.height,
                    img.width
                ));
            }
            data.extend_from_slice(&img.data);
            len += 1;
        }
        Ok(Self {
            len,
            channels,
            size,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

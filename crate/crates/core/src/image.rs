//! Floating-point raster used throughout the pipeline, plus PNG / PPM I/O.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, Limits};

use crate::error::{invalid, Result};

/// Smallest accepted side length, in pixels.
pub const MIN_SIDE: usize = 8;

/// Largest side length accepted by the decoder.
const MAX_DECODE_SIDE: u32 = 16_384;

/// Row-major, channel-interleaved image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "pixel buffer has {} samples, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Uniform image. `value` is clamped to `[0, 1]`.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        check_dims(height, width, channels)?;
        Ok(Self {
            height,
            width,
            channels,
            data: vec![clamp01(value); height * width * channels],
        })
    }

    /// Builds an image from a per-sample function `f(y, x, c)`; results are clamped.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(height, width, channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Writes one sample, clamped to `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let idx = (y * self.width + x) * self.channels + c;
        self.data[idx] = clamp01(value);
    }

    /// Applies `f` to every sample and clamps the result.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| clamp01(f(v))).collect(),
        }
    }

    /// Channel-mean grayscale plane (length `height * width`).
    pub fn gray_plane(&self) -> Vec<f64> {
        let c = self.channels as f64;
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect()
    }

    /// Extracts one channel as a plane.
    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Bilinear resampling to `height × width` (pixel-centre aligned).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        check_dims(height, width, self.channels)?;
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let (y0, y1, fy) = bilinear_taps((y as f64 + 0.5) * sy - 0.5, self.height);
            for x in 0..width {
                let (x0, x1, fx) = bilinear_taps((x as f64 + 0.5) * sx - 0.5, self.width);
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    out.push(clamp01(top * (1.0 - fy) + bottom * fy));
                }
            }
        }
        Ok(Image {
            height,
            width,
            channels: self.channels,
            data: out,
        })
    }

    /// Copies the window `[top, top + height) × [left, left + width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(invalid("crop window outside image"));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        // Crops may legitimately be smaller than MIN_SIDE when used as an
        // intermediate; skip the size check.
        Ok(Image {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Mirror about the vertical axis.
    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let start = (y * self.width + x) * self.channels;
                data.extend_from_slice(&self.data[start..start + self.channels]);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    /// Decodes PNG or binary PPM bytes; samples are divided by 255.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let format = image::guess_format(bytes)?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
            return Err(invalid(format!("unsupported image format {format:?}")));
        }
        let mut reader = ImageReader::with_format(Cursor::new(bytes), format);
        let mut limits = Limits::default();
        limits.max_image_width = Some(MAX_DECODE_SIDE);
        limits.max_image_height = Some(MAX_DECODE_SIDE);
        limits.max_alloc = Some(512 * 1024 * 1024);
        reader.limits(limits);
        let decoded = reader.decode()?;
        Self::from_dynamic(&decoded)
    }

    fn from_dynamic(img: &DynamicImage) -> Result<Image> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            Image::new(h, w, 3, data)
        } else {
            let gray = img.to_luma8();
            let data = gray
                .as_raw()
                .iter()
                .map(|&v| f64::from(v) / 255.0)
                .collect();
            Image::new(h, w, 1, data)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }

    /// 8-bit samples, rounded to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let dynamic = match self.channels {
            1 => DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
                    .ok_or_else(|| invalid("buffer size mismatch"))?,
            ),
            _ => DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
                    .ok_or_else(|| invalid("buffer size mismatch"))?,
            ),
        };
        let mut out = Cursor::new(Vec::new());
        dynamic.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// Round-trips the samples through 8-bit quantization, as a PNG save and
    /// reload would.
    pub fn quantized(&self) -> Image {
        self.map(|v| f64::from(quantize(v)) / 255.0)
    }
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Neighbouring source indices and blend weight for a continuous coordinate.
#[inline]
pub(crate) fn bilinear_taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f64)
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(invalid(format!("unsupported channel count {channels}")));
    }
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(invalid(format!(
            "image {height}x{width} smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(12, 10, 3, |y, x, c| (y * 10 + x + c) as f64 / 200.0).unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Image::filled(7, 8, 1, 0.0).is_err());
        assert!(Image::filled(8, 8, 2, 0.0).is_err());
        assert!(Image::new(8, 8, 1, vec![0.0; 63]).is_err());
        let mut data = vec![0.0; 64];
        data[5] = 1.5;
        assert!(Image::new(8, 8, 1, data).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = ramp().quantized();
        let back = Image::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);

        let gray = Image::from_fn(9, 11, 1, |y, x, _| ((y * 11 + x) % 256) as f64 / 255.0).unwrap();
        let back = Image::decode(&gray.encode_png().unwrap()).unwrap();
        assert_eq!(back, gray);
    }

    #[test]
    fn decodes_binary_ppm() {
        let mut bytes = b"P6\n8 8\n255\n".to_vec();
        bytes.extend((0..8 * 8 * 3).map(|i| (i % 256) as u8));
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (8, 8, 3));
        assert_eq!(img.get(0, 0, 2), 2.0 / 255.0);
    }

    #[test]
    fn garbage_is_an_error_not_a_panic() {
        assert!(Image::decode(b"").is_err());
        assert!(Image::decode(b"P6\n999999 999999\n255\n").is_err());
        assert!(Image::decode(&[0x89, b'P', b'N', b'G', 0, 0]).is_err());
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Image::filled(20, 30, 3, 0.25).unwrap();
        let r = img.resize_bilinear(16, 16).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(3, 0, 1), img.get(3, 9, 1));
    }

    #[test]
    fn crop_copies_window() {
        let img = ramp();
        let c = img.crop(2, 3, 4, 5).unwrap();
        assert_eq!(c.get(1, 1, 0), img.get(3, 4, 0));
        assert!(img.crop(10, 0, 4, 4).is_err());
    }
}

//! Gray-fill purification of detected patch regions.

use std::io::Cursor;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::errormap::BlockGrid;
use crate::image::Image;

/// Default fill value (128/255 rounds to 0.5 within 8-bit precision).
pub const DEFAULT_GRAY: f64 = 0.5;

/// Default dilation, in blocks.
pub const DEFAULT_DILATION: usize = 1;

/// Per-pixel binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Mask of the axis-aligned rectangle `[top, top + h) × [left, left + w)`,
    /// clipped to the mask bounds.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut m = Self::empty(height, width);
        for y in top.min(height)..(top + h).min(height) {
            for x in left.min(width)..(left + w).min(width) {
                m.bits[y * width + x] = true;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &PixelMask) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(invalid("mask shapes differ"));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// Encodes the mask as a 1-bit grayscale PNG (set pixels are white).
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let mut out = Cursor::new(Vec::new());
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::One);
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&packed).map_err(png_err)?;
        }
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

fn png_err(e: png::EncodingError) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

/// Pixel mask covering `component`'s blocks grown by `dilation` blocks in
/// every direction (8-connected), clipped to the grid and the image.
pub fn build_mask(
    component: &[(usize, usize)],
    grid: &BlockGrid,
    dilation: usize,
    height: usize,
    width: usize,
) -> Result<PixelMask> {
    if component.is_empty() {
        return Err(invalid("cannot build a mask from an empty component"));
    }
    if let Some(&(r, c)) = component
        .iter()
        .find(|&&(r, c)| r >= grid.rows || c >= grid.cols)
    {
        return Err(invalid(format!("block ({r}, {c}) outside the grid")));
    }
    let mut blocks = vec![false; grid.len()];
    for &(r, c) in component {
        let r_lo = r.saturating_sub(dilation);
        let r_hi = (r + dilation).min(grid.rows - 1);
        let c_lo = c.saturating_sub(dilation);
        let c_hi = (c + dilation).min(grid.cols - 1);
        for rr in r_lo..=r_hi {
            for cc in c_lo..=c_hi {
                blocks[rr * grid.cols + cc] = true;
            }
        }
    }
    let mut mask = PixelMask::empty(height, width);
    for y in 0..height {
        let br = y / grid.block_h;
        if br >= grid.rows {
            break;
        }
        for x in 0..width {
            let bc = x / grid.block_w;
            if bc < grid.cols && blocks[br * grid.cols + bc] {
                mask.bits[y * width + x] = true;
            }
        }
    }
    Ok(mask)
}

/// Sets every masked pixel to `gray` on all channels; other pixels are copied.
pub fn apply_gray_mask(image: &Image, mask: &PixelMask, gray: f64) -> Result<Image> {
    if image.height() != mask.height || image.width() != mask.width {
        return Err(invalid("mask and image differ in shape"));
    }
    if !(0.0..=1.0).contains(&gray) {
        return Err(invalid(format!("gray value {gray} outside [0, 1]")));
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) {
                for c in 0..image.channels() {
                    out.set(y, x, c, gray);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> BlockGrid {
        BlockGrid::fit(224, 224, 14, 14).unwrap()
    }

    #[test]
    fn single_block_no_dilation() {
        let m = build_mask(&[(0, 0)], &grid(), 0, 224, 224).unwrap();
        assert_eq!(m, PixelMask::rect(224, 224, 0, 0, 16, 16));
    }

    #[test]
    fn interior_block_dilated() {
        let m = build_mask(&[(5, 7)], &grid(), 1, 224, 224).unwrap();
        assert_eq!(m.count(), 48 * 48);
        assert_eq!(m, PixelMask::rect(224, 224, 64, 96, 48, 48));
    }

    #[test]
    fn corner_block_dilation_is_clipped() {
        for &(r, c, top, left) in &[(0, 0, 0, 0), (13, 13, 192, 192), (0, 13, 0, 192)] {
            let m = build_mask(&[(r, c)], &grid(), 1, 224, 224).unwrap();
            assert_eq!(m, PixelMask::rect(224, 224, top, left, 32, 32));
        }
    }

    #[test]
    fn partial_edge_blocks_clip_to_image() {
        let g = BlockGrid::fit(20, 20, 3, 3).unwrap(); // 7-px blocks, last one 6 px
        let m = build_mask(&[(2, 2)], &g, 0, 20, 20).unwrap();
        assert_eq!(m, PixelMask::rect(20, 20, 14, 14, 6, 6));
    }

    #[test]
    fn empty_component_is_rejected() {
        assert!(build_mask(&[], &grid(), 1, 224, 224).is_err());
        assert!(build_mask(&[(14, 0)], &grid(), 0, 224, 224).is_err());
    }

    #[test]
    fn empty_and_full_masks() {
        let img = Image::from_fn(16, 16, 3, |y, x, c| ((y + x + c) % 7) as f64 / 7.0).unwrap();
        assert_eq!(
            apply_gray_mask(&img, &PixelMask::empty(16, 16), 0.5).unwrap(),
            img
        );
        let full = PixelMask::rect(16, 16, 0, 0, 16, 16);
        let out = apply_gray_mask(&img, &full, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = Image::filled(16, 16, 1, 0.0).unwrap();
        assert!(apply_gray_mask(&img, &PixelMask::empty(16, 17), 0.5).is_err());
        assert!(apply_gray_mask(&img, &PixelMask::empty(16, 16), 1.5).is_err());
    }

    #[test]
    fn iou_basics() {
        let a = PixelMask::rect(10, 10, 0, 0, 4, 4);
        let b = PixelMask::rect(10, 10, 0, 2, 4, 4);
        assert!((a.iou(&b).unwrap() - 8.0 / 24.0).abs() < 1e-15);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
    }

    #[test]
    fn mask_png_decodes_back() {
        let m = PixelMask::rect(13, 11, 2, 3, 5, 4);
        let img = Image::decode(&m.encode_png().unwrap()).unwrap();
        for y in 0..13 {
            for x in 0..11 {
                assert_eq!(img.get(y, x, 0) == 1.0, m.get(y, x));
            }
        }
    }

    proptest! {
        #[test]
        fn purification_is_local_and_idempotent(seed in any::<u64>(), gray in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Image::from_fn(32, 32, 3, |_, _, _| rng.random()).unwrap();
            let g = BlockGrid::fit(32, 32, 4, 4).unwrap();
            let comp = vec![(rng.random_range(0..4), rng.random_range(0..4))];
            let mask = build_mask(&comp, &g, rng.random_range(0..2), 32, 32).unwrap();
            let once = apply_gray_mask(&img, &mask, gray).unwrap();
            let twice = apply_gray_mask(&once, &mask, gray).unwrap();
            prop_assert_eq!(&once, &twice);
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        if mask.get(y, x) {
                            prop_assert_eq!(once.get(y, x, c), gray);
                        } else {
                            prop_assert_eq!(once.get(y, x, c).to_bits(), img.get(y, x, c).to_bits());
                        }
                    }
                }
            }
        }
    }
}

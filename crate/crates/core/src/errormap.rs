//! Block-wise reconstruction-error grids.
//!
//! An image is pushed through a [`Reconstructor`] and the squared residual is
//! averaged inside each block of a [`BlockGrid`]. Real autoencoder residuals
//! can be brought in from a loss-map text file instead.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, parse_err, Result};
use crate::image::{bilinear_taps, clamp01, Image};

/// Default number of block rows and columns (16-px blocks on a 224-px image).
pub const DEFAULT_GRID: usize = 14;

/// Largest loss map accepted from a file, in blocks per side.
pub const MAX_MAP_SIDE: usize = 4096;

/// Partition of an image into `rows × cols` blocks of `block_h × block_w`
/// pixels. The last row and column may be partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub rows: usize,
    pub cols: usize,
    pub block_h: usize,
    pub block_w: usize,
}

impl BlockGrid {
    pub fn new(rows: usize, cols: usize, block_h: usize, block_w: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(invalid("block grid needs at least 2 rows and 2 columns"));
        }
        if block_h == 0 || block_w == 0 {
            return Err(invalid("block size must be positive"));
        }
        Ok(Self {
            rows,
            cols,
            block_h,
            block_w,
        })
    }

    /// Grid of at most `rows × cols` blocks covering a `height × width` image.
    ///
    /// Block sides are `ceil(side / count)`; the counts are then reduced so no
    /// row or column of blocks falls entirely outside the image.
    pub fn fit(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("block grid needs at least one row and column"));
        }
        let block_h = height.div_ceil(rows);
        let block_w = width.div_ceil(cols);
        Self::new(
            height.div_ceil(block_h),
            width.div_ceil(block_w),
            block_h,
            block_w,
        )
    }

    /// True when every pixel lies in exactly one non-empty block.
    pub fn covers(&self, height: usize, width: usize) -> bool {
        self.rows * self.block_h >= height
            && (self.rows - 1) * self.block_h < height
            && self.cols * self.block_w >= width
            && (self.cols - 1) * self.block_w < width
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel rows spanned by block row `r`, clipped to `height`.
    pub fn row_span(&self, r: usize, height: usize) -> std::ops::Range<usize> {
        (r * self.block_h).min(height)..((r + 1) * self.block_h).min(height)
    }

    /// Pixel columns spanned by block column `c`, clipped to `width`.
    pub fn col_span(&self, c: usize, width: usize) -> std::ops::Range<usize> {
        (c * self.block_w).min(width)..((c + 1) * self.block_w).min(width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSource {
    Computed,
    Imported,
}

/// Row-major grid of non-negative, finite block losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    source: LossSource,
}

impl ErrorMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, source: LossSource) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols < 2 {
            return Err(invalid("error map needs at least two blocks"));
        }
        if values.len() != rows * cols {
            return Err(invalid(format!(
                "error map has {} values, expected {}",
                values.len(),
                rows * cols
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!("block loss {v} is negative or non-finite")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            source,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> LossSource {
        self.source
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Multiplies every entry by `factor` (must be finite and ≥ 0).
    pub fn scaled(&self, factor: f64) -> Result<ErrorMap> {
        ErrorMap::new(
            self.rows,
            self.cols,
            self.values.iter().map(|v| v * factor).collect(),
            self.source,
        )
    }

    /// Loss-map text: `rows cols` header, then one whitespace-separated line
    /// per row. Values use the shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for row in self.values.chunks(self.cols) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Parses loss-map text. Blank lines after the last row are ignored.
pub fn parse_loss_map(text: &str) -> Result<ErrorMap> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| parse_err(0, "empty loss map"))?;
    let mut fields = header.split_whitespace();
    let mut dim = |what: &str| -> Result<usize> {
        let tok = fields
            .next()
            .ok_or_else(|| parse_err(1, format!("missing {what}")))?;
        let n: usize = tok
            .parse()
            .map_err(|_| parse_err(1, format!("bad {what} {tok:?}")))?;
        if n == 0 || n > MAX_MAP_SIDE {
            return Err(parse_err(1, format!("{what} {n} out of range")));
        }
        Ok(n)
    };
    let rows = dim("row count")?;
    let cols = dim("column count")?;
    if fields.next().is_some() {
        return Err(parse_err(1, "header must be `rows cols`"));
    }
    if rows * cols < 2 {
        return Err(parse_err(1, "loss map needs at least two blocks"));
    }

    let mut values = Vec::new();
    let mut seen_rows = 0;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if seen_rows == rows {
            return Err(parse_err(line_no, "more rows than declared"));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite loss {tok:?}")));
            }
            if v < 0.0 {
                return Err(parse_err(line_no, format!("negative loss {v}")));
            }
            values.push(v);
            if values.len() - before > cols {
                break;
            }
        }
        if values.len() - before != cols {
            return Err(parse_err(
                line_no,
                format!("expected {cols} values, found {}", values.len() - before),
            ));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(parse_err(
            0,
            format!("expected {rows} rows, found {seen_rows}"),
        ));
    }
    ErrorMap::new(rows, cols, values, LossSource::Imported).map_err(|e| parse_err(0, e.to_string()))
}

/// Loads a loss-map file and checks it has the expected dimensions.
pub fn import_error_map(path: impl AsRef<Path>, rows: usize, cols: usize) -> Result<ErrorMap> {
    let text = std::fs::read_to_string(path)?;
    let map = parse_loss_map(&text)?;
    if map.rows() != rows || map.cols() != cols {
        return Err(parse_err(
            1,
            format!(
                "loss map is {}x{}, expected {rows}x{cols}",
                map.rows(),
                map.cols()
            ),
        ));
    }
    Ok(map)
}

/// Mean squared pixel difference per block, averaged over pixels and channels.
pub fn block_losses(image: &Image, recon: &Image, grid: &BlockGrid) -> Result<ErrorMap> {
    if !image.same_shape(recon) {
        return Err(invalid("image and reconstruction differ in shape"));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    if !grid.covers(h, w) {
        return Err(invalid(format!(
            "{}x{} grid of {}x{} blocks does not cover a {h}x{w} image",
            grid.rows, grid.cols, grid.block_h, grid.block_w
        )));
    }
    let a = image.data();
    let b = recon.data();
    let mut sums = vec![0.0; grid.len()];
    for y in 0..h {
        let row_base = (y / grid.block_h) * grid.cols;
        let line = y * w * ch;
        for x in 0..w {
            let slot = row_base + x / grid.block_w;
            let px = line + x * ch;
            let mut acc = 0.0;
            for k in px..px + ch {
                let d = a[k] - b[k];
                acc += d * d;
            }
            sums[slot] += acc;
        }
    }
    for r in 0..grid.rows {
        let bh = grid.row_span(r, h).len();
        for c in 0..grid.cols {
            let bw = grid.col_span(c, w).len();
            sums[r * grid.cols + c] /= (bh * bw * ch) as f64;
        }
    }
    ErrorMap::new(grid.rows, grid.cols, sums, LossSource::Computed)
}

/// Maps an image to a same-shape estimate of its "expected" appearance.
pub trait Reconstructor: Send + Sync {
    fn name(&self) -> &str;
    fn reconstruct(&self, image: &Image) -> Result<Image>;
}

/// Analytic reference reconstructors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceReconstructor {
    /// Area-average downsampling by `factor`, then bilinear upsampling.
    LowPass { factor: usize },
    /// `k × k` median filter with replicated borders (`k` odd).
    Median { k: usize },
}

impl ReferenceReconstructor {
    pub const LOWPASS: Self = Self::LowPass { factor: 4 };
    pub const MEDIAN: Self = Self::Median { k: 5 };

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "lowpass" => Ok(Self::LOWPASS),
            "median" => Ok(Self::MEDIAN),
            other => Err(invalid(format!("unknown reconstructor {other:?}"))),
        }
    }
}

impl Reconstructor for ReferenceReconstructor {
    fn name(&self) -> &str {
        match self {
            Self::LowPass { .. } => "lowpass",
            Self::Median { .. } => "median",
        }
    }

    fn reconstruct(&self, image: &Image) -> Result<Image> {
        match *self {
            Self::LowPass { factor } => lowpass(image, factor),
            Self::Median { k } => median(image, k),
        }
    }
}

/// Runs `method` and clamps its output into `[0, 1]`.
pub fn reconstruct(image: &Image, method: &dyn Reconstructor) -> Result<Image> {
    let out = method.reconstruct(image)?;
    if !out.same_shape(image) {
        return Err(invalid(format!(
            "reconstructor {} changed the image shape",
            method.name()
        )));
    }
    Ok(out.map(clamp01))
}

fn lowpass(image: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(invalid("low-pass factor must be positive"));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let lh = h.div_ceil(factor);
    let lw = w.div_ceil(factor);
    let src = image.data();

    let mut low = vec![0.0; lh * lw * ch];
    for y in 0..h {
        let ly = y / factor;
        for x in 0..w {
            let base = (ly * lw + x / factor) * ch;
            let px = (y * w + x) * ch;
            for c in 0..ch {
                low[base + c] += src[px + c];
            }
        }
    }
    for ly in 0..lh {
        let ch_h = ((ly + 1) * factor).min(h) - ly * factor;
        for lx in 0..lw {
            let cw = ((lx + 1) * factor).min(w) - lx * factor;
            let n = (ch_h * cw) as f64;
            let base = (ly * lw + lx) * ch;
            for v in &mut low[base..base + ch] {
                *v /= n;
            }
        }
    }

    let f = factor as f64;
    let ytaps: Vec<_> = (0..h)
        .map(|y| bilinear_taps((y as f64 + 0.5) / f - 0.5, lh))
        .collect();
    let xtaps: Vec<_> = (0..w)
        .map(|x| bilinear_taps((x as f64 + 0.5) / f - 0.5, lw))
        .collect();
    let mut out = Vec::with_capacity(h * w * ch);
    for &(y0, y1, fy) in &ytaps {
        for &(x0, x1, fx) in &xtaps {
            for c in 0..ch {
                let at = |yy: usize, xx: usize| low[(yy * lw + xx) * ch + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image::new(h, w, ch, out.into_iter().map(clamp01).collect())
}

fn median(image: &Image, k: usize) -> Result<Image> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(invalid(format!("median window {k} must be odd")));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let mut out = Vec::with_capacity(h * w * ch);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for c in 0..ch {
                window.clear();
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        window.push(image.get(yy, xx, c));
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
                out.push(*m);
            }
        }
    }
    Image::new(h, w, ch, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Image {
        Image::from_fn(h, w, ch, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn grid_fit_default() {
        let g = BlockGrid::fit(224, 224, 14, 14).unwrap();
        assert_eq!(g, BlockGrid::new(14, 14, 16, 16).unwrap());
        assert!(g.covers(224, 224));
        // 9 rows into 4 would leave an empty fourth row; fit shrinks it.
        let g = BlockGrid::fit(9, 9, 4, 4).unwrap();
        assert_eq!((g.rows, g.block_h), (3, 3));
        assert!(g.covers(9, 9));
        assert!(BlockGrid::fit(8, 8, 1, 4).is_err());
    }

    #[test]
    fn lowpass_fixes_constants() {
        let img = Image::filled(30, 21, 3, 0.5).unwrap();
        let out = reconstruct(&img, &ReferenceReconstructor::LOWPASS).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn median_fixes_constants() {
        let img = Image::filled(16, 16, 1, 0.3).unwrap();
        let out = reconstruct(&img, &ReferenceReconstructor::MEDIAN).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn median_removes_impulses_everywhere() {
        for &(y, x) in &[(0, 0), (7, 9), (15, 15), (0, 12)] {
            let mut img = Image::filled(16, 16, 1, 0.0).unwrap();
            img.set(y, x, 0, 1.0);
            let out = reconstruct(&img, &ReferenceReconstructor::MEDIAN).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0), "impulse at {y},{x}");
        }
    }

    #[test]
    fn median_rejects_even_window() {
        let img = Image::filled(8, 8, 1, 0.0).unwrap();
        assert!(ReferenceReconstructor::Median { k: 4 }
            .reconstruct(&img)
            .is_err());
    }

    #[test]
    fn reconstructors_preserve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(h, w, ch) in &[(8, 8, 1), (13, 29, 3), (224, 224, 3)] {
            let img = random_image(&mut rng, h, w, ch);
            for m in [
                ReferenceReconstructor::LOWPASS,
                ReferenceReconstructor::MEDIAN,
            ] {
                let out = reconstruct(&img, &m).unwrap();
                assert!(out.same_shape(&img));
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn identical_images_give_zero_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 32, 32, 3);
        let g = BlockGrid::fit(32, 32, 4, 4).unwrap();
        let m = block_losses(&img, &img, &g).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
        assert_eq!(m.source(), LossSource::Computed);
    }

    #[test]
    fn uniform_offset_in_one_block() {
        let img = Image::filled(32, 32, 3, 0.4).unwrap();
        let mut recon = img.clone();
        for y in 16..32 {
            for x in 0..16 {
                for c in 0..3 {
                    recon.set(y, x, c, 0.5);
                }
            }
        }
        let g = BlockGrid::fit(32, 32, 2, 2).unwrap();
        let m = block_losses(&img, &recon, &g).unwrap();
        assert!((m.get(1, 0) - 0.01).abs() < 1e-15);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    /// Independent per-pixel summation over each block's pixel rectangle.
    fn brute_block_mse(a: &Image, b: &Image, g: &BlockGrid) -> Vec<f64> {
        let mut out = Vec::new();
        for r in 0..g.rows {
            for c in 0..g.cols {
                let (mut s, mut n) = (0.0, 0usize);
                for y in r * g.block_h..((r + 1) * g.block_h).min(a.height()) {
                    for x in c * g.block_w..((c + 1) * g.block_w).min(a.width()) {
                        for k in 0..a.channels() {
                            s += (a.get(y, x, k) - b.get(y, x, k)).powi(2);
                            n += 1;
                        }
                    }
                }
                out.push(s / n as f64);
            }
        }
        out
    }

    #[test]
    fn block_losses_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(16, 16), (17, 23), (224, 224)] {
            let a = random_image(&mut rng, h, w, 3);
            let b = random_image(&mut rng, h, w, 3);
            for &(gr, gc) in &[(2, 2), (3, 5), (14, 14)] {
                let g = BlockGrid::fit(h, w, gr, gc).unwrap();
                let m = block_losses(&a, &b, &g).unwrap();
                for (got, want) in m.values().iter().zip(brute_block_mse(&a, &b, &g)) {
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_losses_shape_mismatch() {
        let a = Image::filled(16, 16, 3, 0.0).unwrap();
        let b = Image::filled(16, 16, 1, 0.0).unwrap();
        let g = BlockGrid::fit(16, 16, 2, 2).unwrap();
        assert!(matches!(
            block_losses(&a, &b, &g),
            Err(crate::Error::InvalidInput(_))
        ));
        let small = BlockGrid::new(2, 2, 4, 4).unwrap();
        assert!(block_losses(&a, &a, &small).is_err());
    }

    #[test]
    fn parse_zeros_and_reject_negative() {
        let m = parse_loss_map("2 2\n0 0\n0 0\n").unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
        assert_eq!(m.source(), LossSource::Imported);
        assert!(matches!(
            parse_loss_map("2 2\n0 0\n0 -1\n"),
            Err(crate::Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn parse_rejects_malformed() {
        for bad in [
            "",
            "2",
            "2 2 2\n0 0\n0 0",
            "2 2\n0 0\n",
            "2 2\n0 0\n0 0\n0 0",
            "2 2\n0 0 0\n0 0",
            "2 2\n0 NaN\n0 0",
            "2 2\n0 inf\n0 0",
            "2 2\n0 x\n0 0",
            "1 1\n0",
            "0 5\n",
            "99999 2\n",
        ] {
            assert!(parse_loss_map(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn import_checks_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, "2 3\n1 2 3\n4 5 6\n").unwrap();
        assert!(import_error_map(&path, 2, 3).is_ok());
        assert!(import_error_map(&path, 3, 2).is_err());
    }

    proptest! {
        #[test]
        fn export_import_is_bit_identical(
            rows in 1usize..6, cols in 2usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random::<f64>() * 10f64.powi(rng.random_range(-12..3)))
                .collect();
            let m = ErrorMap::new(rows, cols, vals, LossSource::Computed).unwrap();
            let back = parse_loss_map(&m.to_text()).unwrap();
            for (a, b) in m.values().iter().zip(back.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn losses_scale_quadratically(seed in any::<u64>(), s in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 16, 16, 1);
            let b = random_image(&mut rng, 16, 16, 1);
            // Shrink the difference about `a` by `s`; values stay in [0, 1].
            let scaled = Image::from_fn(16, 16, 1, |y, x, c| {
                a.get(y, x, c) + s * (b.get(y, x, c) - a.get(y, x, c))
            }).unwrap();
            let g = BlockGrid::fit(16, 16, 4, 4).unwrap();
            let m1 = block_losses(&a, &b, &g).unwrap();
            let m2 = block_losses(&a, &scaled, &g).unwrap();
            for (x, y) in m1.values().iter().zip(m2.values()) {
                prop_assert!((x * s * s - y).abs() <= 1e-12 * (1.0 + x));
            }
        }

        #[test]
        fn block_permutation_equivariance(seed in any::<u64>()) {
            // Swap two whole blocks in both images; their losses swap too.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 16, 16, 3);
            let b = random_image(&mut rng, 16, 16, 3);
            let swap = |img: &Image| Image::from_fn(16, 16, 3, |y, x, c| {
                let (sy, sx) = if y < 8 && x < 8 {
                    (y + 8, x + 8)
                } else if y >= 8 && x >= 8 {
                    (y - 8, x - 8)
                } else {
                    (y, x)
                };
                img.get(sy, sx, c)
            }).unwrap();
            let g = BlockGrid::fit(16, 16, 2, 2).unwrap();
            let m = block_losses(&a, &b, &g).unwrap();
            let p = block_losses(&swap(&a), &swap(&b), &g).unwrap();
            prop_assert_eq!(m.get(0, 0), p.get(1, 1));
            prop_assert_eq!(m.get(1, 1), p.get(0, 0));
            prop_assert_eq!(m.get(0, 1), p.get(0, 1));
        }
    }
}

//! Thresholded block masks and their connected components.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::errormap::ErrorMap;

/// Block neighbourhood used when growing components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Edge-adjacent neighbours only.
    Four,
    /// Edge- and corner-adjacent neighbours.
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            _ => Err(invalid(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Self::Four => 4,
            Self::Eight => 8,
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Self::Four => &FOUR,
            Self::Eight => &EIGHT,
        }
    }
}

/// Binary grid over blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(invalid("mask size does not match its dimensions"));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.cols + c] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Coordinates of set blocks in raster order.
    pub fn active(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / self.cols, i % self.cols))
    }
}

/// Maximal connected set of active blocks, stored in raster order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Component {
    pub blocks: Vec<(usize, usize)>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// First block in raster order.
    pub fn top_left(&self) -> (usize, usize) {
        self.blocks[0]
    }

    pub fn loss_sum(&self, map: &ErrorMap) -> f64 {
        self.blocks.iter().map(|&(r, c)| map.get(r, c)).sum()
    }
}

/// Blocks whose loss is strictly above mean + one (population) standard
/// deviation of the map.
pub fn active_mask(map: &ErrorMap) -> BlockMask {
    let n = map.len() as f64;
    let mean = map.values().iter().sum::<f64>() / n;
    let var = map
        .values()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let cut = mean + var.sqrt();
    BlockMask {
        rows: map.rows(),
        cols: map.cols(),
        bits: map.values().iter().map(|&v| v > cut).collect(),
    }
}

/// Partitions the active blocks into connected components, returned in
/// raster order of each component's first block.
pub fn connected_components(mask: &BlockMask, connectivity: Connectivity) -> Vec<Component> {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut seen = vec![false; rows * cols];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..rows * cols {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut blocks = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / cols, i % cols);
            blocks.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                let j = nr as usize * cols + nc as usize;
                if mask.bits[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        blocks.sort_unstable();
        out.push(Component { blocks });
    }
    out
}

/// Sorts components by decreasing loss sum; ties keep top-left order.
pub fn rank_by_loss(components: &mut [Component], map: &ErrorMap) {
    components.sort_by(|a, b| {
        b.loss_sum(map)
            .total_cmp(&a.loss_sum(map))
            .then_with(|| a.top_left().cmp(&b.top_left()))
    });
}

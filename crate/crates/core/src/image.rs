//! Image tensors, the l-infinity ball projection, and the hierarchical block grid.
//!
//! Pixels are stored row-major in (channel, row, column) order everywhere in
//! this crate and on the wire.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Smallest block size the hierarchy descends to.
pub const MIN_BLOCK_SIZE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense C x H x W image with intensities nominally in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub shape: Shape,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(invalid(format!(
                "pixel buffer has {} values, shape {}x{}x{} needs {}",
                pixels.len(),
                shape.channels,
                shape.height,
                shape.width,
                shape.len()
            )));
        }
        Ok(Self { shape, pixels })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            pixels: vec![value; shape.len()],
        }
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.shape.height + row) * self.shape.width + col
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.pixels[self.index(channel, row, col)]
    }

    /// Largest absolute per-pixel difference.
    pub fn linf_distance(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs())))
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Projects `candidate` onto the l-infinity ball of radius `epsilon` around
/// `origin`, then clips to [0, 1].
pub fn project_ball(candidate: &Image, origin: &Image, epsilon: f64) -> Result<Image> {
    candidate.check_same_shape(origin)?;
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let pixels = candidate
        .pixels
        .iter()
        .zip(&origin.pixels)
        .map(|(&c, &o)| c.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0))
        .collect();
    Ok(Image {
        shape: candidate.shape,
        pixels,
    })
}

/// Block coordinate: row `i`, column `j`, channel `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl BlockIndex {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }

    /// Spatial L1 distance, ignoring the channel.
    pub fn spatial_l1(&self, other: &BlockIndex) -> usize {
        self.i.abs_diff(other.i) + self.j.abs_diff(other.j)
    }
}

/// Partition of an image into `block_size` x `block_size` per-channel blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub block_size: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub stage: usize,
}

pub fn make_grid(shape: Shape, block_size: usize) -> Result<BlockGrid> {
    if block_size == 0 {
        return Err(invalid("block size must be positive"));
    }
    if shape.is_empty() {
        return Err(invalid("image has no pixels"));
    }
    if block_size > shape.height || block_size > shape.width {
        return Err(invalid(format!(
            "block size {block_size} exceeds image side ({}x{})",
            shape.height, shape.width
        )));
    }
    if shape.height % block_size != 0 || shape.width % block_size != 0 {
        return Err(invalid(format!(
            "block size {block_size} does not divide image sides {}x{}",
            shape.height, shape.width
        )));
    }
    Ok(BlockGrid {
        block_size,
        h: shape.height / block_size,
        w: shape.width / block_size,
        c: shape.channels,
        stage: 0,
    })
}

/// Splits every block into four children of half the side length.
pub fn split_blocks(grid: &BlockGrid) -> Result<BlockGrid> {
    if grid.block_size < 2 {
        return Err(Error::CannotSplit(grid.block_size));
    }
    Ok(BlockGrid {
        block_size: grid.block_size / 2,
        h: grid.h * 2,
        w: grid.w * 2,
        c: grid.c,
        stage: grid.stage + 1,
    })
}

impl BlockGrid {
    pub fn num_blocks(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn image_shape(&self) -> Shape {
        Shape::new(self.c, self.h * self.block_size, self.w * self.block_size)
    }

    pub fn contains(&self, block: &BlockIndex) -> bool {
        block.i < self.h && block.j < self.w && block.k < self.c
    }

    /// Channel-major linear index, consistent with the pixel layout.
    pub fn linear_index(&self, block: &BlockIndex) -> usize {
        (block.k * self.h + block.i) * self.w + block.j
    }

    pub fn block_at(&self, linear: usize) -> BlockIndex {
        let j = linear % self.w;
        let i = (linear / self.w) % self.h;
        let k = linear / (self.w * self.h);
        BlockIndex { i, j, k }
    }

    /// All blocks in linear-index order.
    pub fn blocks(&self) -> impl Iterator<Item = BlockIndex> + '_ {
        (0..self.num_blocks()).map(move |n| self.block_at(n))
    }

    /// Flat pixel offsets covered by `block`, in row-major order.
    pub fn pixel_offsets(&self, block: &BlockIndex) -> impl Iterator<Item = usize> {
        let b = self.block_size;
        let width = self.w * b;
        let height = self.h * b;
        let base_row = block.i * b;
        let base_col = block.j * b;
        let channel_base = block.k * height * width;
        (0..b).flat_map(move |r| {
            let row_base = channel_base + (base_row + r) * width + base_col;
            (0..b).map(move |c| row_base + c)
        })
    }

    /// The block of this grid containing pixel `(channel, row, col)`.
    pub fn block_of_pixel(&self, channel: usize, row: usize, col: usize) -> BlockIndex {
        BlockIndex::new(row / self.block_size, col / self.block_size, channel)
    }

    /// The four children of `block` after `split_blocks`.
    pub fn children(&self, block: &BlockIndex) -> [BlockIndex; 4] {
        let (i, j, k) = (block.i * 2, block.j * 2, block.k);
        [
            BlockIndex::new(i, j, k),
            BlockIndex::new(i, j + 1, k),
            BlockIndex::new(i + 1, j, k),
            BlockIndex::new(i + 1, j + 1, k),
        ]
    }
}

/// Returns a copy of `x` with `amount` added to every pixel of `block`.
pub fn apply_block_delta(
    x: &Image,
    grid: &BlockGrid,
    block: &BlockIndex,
    amount: f64,
) -> Result<Image> {
    if x.shape != grid.image_shape() {
        return Err(invalid(format!(
            "image shape {:?} does not match grid {:?}",
            x.shape,
            grid.image_shape()
        )));
    }
    if !grid.contains(block) {
        return Err(invalid(format!("block {block:?} outside grid")));
    }
    let mut out = x.clone();
    for offset in grid.pixel_offsets(block) {
        out.pixels[offset] += amount;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape3(side: usize) -> Shape {
        Shape::new(3, side, side)
    }

    #[test]
    fn projection_examples() {
        let origin = Image::new(Shape::new(1, 1, 3), vec![0.5, 0.98, 0.3]).unwrap();
        let cand = Image::new(Shape::new(1, 1, 3), vec![0.9, 1.2, 0.3]).unwrap();
        let out = project_ball(&cand, &origin, 0.05).unwrap();
        assert!((out.pixels[0] - 0.55).abs() < 1e-15);
        assert_eq!(out.pixels[1], 1.0);
        assert_eq!(out.pixels[2], 0.3);
        assert_eq!(project_ball(&origin, &origin, 0.2).unwrap(), origin);
    }

    #[test]
    fn projection_rejects_shape_mismatch() {
        let a = Image::filled(Shape::new(1, 2, 2), 0.5);
        let b = Image::filled(Shape::new(1, 2, 3), 0.5);
        assert!(matches!(
            project_ball(&a, &b, 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(shape3(224), 32).unwrap();
        assert_eq!((g.h, g.w, g.c, g.num_blocks()), (7, 7, 3, 147));
        let g = make_grid(shape3(32), 32).unwrap();
        assert_eq!(g.num_blocks(), 3);
        let g = make_grid(shape3(32), 8).unwrap();
        assert_eq!((g.h, g.w, g.c, g.num_blocks()), (4, 4, 3, 48));
        assert!(make_grid(shape3(16), 32).is_err());
        assert!(make_grid(shape3(30), 8).is_err());
    }

    #[test]
    fn split_examples() {
        let g = make_grid(shape3(224), 32).unwrap();
        let s = split_blocks(&g).unwrap();
        assert_eq!((s.block_size, s.h, s.w, s.c, s.stage), (16, 14, 14, 3, 1));
        let s2 = split_blocks(&s).unwrap();
        assert_eq!((s2.block_size, s2.h, s2.w), (8, 28, 28));
        assert_eq!(s2.num_blocks(), 4 * s.num_blocks());
        let unit = make_grid(shape3(4), 1).unwrap();
        assert_eq!(split_blocks(&unit), Err(Error::CannotSplit(1)));
    }

    #[test]
    fn split_children_partition_parent() {
        let g = make_grid(shape3(16), 8).unwrap();
        let s = split_blocks(&g).unwrap();
        for parent in g.blocks() {
            let mut parent_px: Vec<usize> = g.pixel_offsets(&parent).collect();
            let mut child_px: Vec<usize> = s
                .children(&parent)
                .iter()
                .flat_map(|c| s.pixel_offsets(c).collect::<Vec<_>>())
                .collect();
            let n_children = child_px.len();
            parent_px.sort_unstable();
            child_px.sort_unstable();
            child_px.dedup();
            assert_eq!(child_px.len(), n_children, "children overlap");
            assert_eq!(parent_px, child_px);
        }
    }

    #[test]
    fn block_delta_examples() {
        let x = Image::filled(Shape::new(1, 4, 4), 0.2);
        let g = make_grid(x.shape, 4).unwrap();
        let b = BlockIndex::new(0, 0, 0);
        assert_eq!(apply_block_delta(&x, &g, &b, 0.0).unwrap(), x);
        let y = apply_block_delta(&x, &g, &b, 0.1).unwrap();
        assert!(y.pixels.iter().all(|&p| (p - 0.3).abs() < 1e-15));
        assert!(apply_block_delta(&x, &g, &BlockIndex::new(1, 0, 0), 0.1).is_err());
    }

    #[test]
    fn linear_index_round_trip() {
        let g = make_grid(shape3(32), 8).unwrap();
        for (n, b) in g.blocks().enumerate() {
            assert_eq!(g.linear_index(&b), n);
        }
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent(
            vals in proptest::collection::vec((0.0f64..=1.0, -0.5f64..1.5), 12),
            eps in 0.001f64..0.3,
        ) {
            let shape = Shape::new(1, 3, 4);
            let origin = Image::new(shape, vals.iter().map(|v| v.0).collect()).unwrap();
            let cand = Image::new(shape, vals.iter().map(|v| v.1).collect()).unwrap();
            let p = project_ball(&cand, &origin, eps).unwrap();
            prop_assert!(p.in_unit_range());
            prop_assert!(p.linf_distance(&origin).unwrap() <= eps + 1e-12);
            prop_assert_eq!(project_ball(&p, &origin, eps).unwrap(), p);
        }

        #[test]
        fn block_delta_touches_b_squared_pixels(
            bi in 0usize..4, bj in 0usize..4, bk in 0usize..3,
            amount in 0.01f64..1.0,
        ) {
            let x = Image::filled(shape3(16), 0.0);
            let g = make_grid(x.shape, 4).unwrap();
            let y = apply_block_delta(&x, &g, &BlockIndex::new(bi, bj, bk), amount).unwrap();
            let changed = x.pixels.iter().zip(&y.pixels).filter(|(a, b)| a != b).count();
            prop_assert_eq!(changed, 16);
            let total: f64 = x.pixels.iter().zip(&y.pixels).map(|(a, b)| (a - b).abs()).sum();
            prop_assert!((total - amount * 16.0).abs() < 1e-9);
        }
    }
}

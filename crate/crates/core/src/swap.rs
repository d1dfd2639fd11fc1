//! Blockwise Swapping: copy random patch-aligned rectangles from the later
//! frame into the earlier one.
//!
//! Per iteration the stream is consumed in a fixed order: block size,
//! aspect ratio, top row, left column (see [`crate::rng`] for the
//! conversions). The loop counter advances by the rectangle area even
//! when rectangles overlap, so it is a budget, not a popcount; the mask is
//! the ground truth.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::patch::PatchSequence;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwapConfig {
    /// Target fraction of patches to replace, in `[0, 1]`.
    pub ratio: f64,
    /// Minimum block area in patches.
    pub min_block: usize,
    /// Minimum aspect ratio, in `(0, 1]`.
    pub min_aspect: f64,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self { ratio: 0.5, min_block: 16, min_aspect: 0.3 }
    }
}

impl SwapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::config(format!("swap ratio {} outside [0, 1]", self.ratio)));
        }
        if self.min_block < 1 {
            return Err(Error::config("minimum swap block must be at least 1 patch"));
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= 1.0) {
            return Err(Error::config(format!("minimum aspect {} outside (0, 1]", self.min_aspect)));
        }
        Ok(())
    }
}

/// One placed rectangle, in patch-grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwapBlock {
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapRecord {
    pub swapped: PatchSequence,
    /// `true` where the patch came from the later frame.
    pub mask: Vec<bool>,
    pub blocks: Vec<SwapBlock>,
    /// Final value of the budget counter (sum of block areas).
    pub counter: usize,
    pub seed: u64,
}

impl SwapRecord {
    pub fn swapped_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Draws the rectangles for one swap on an `h × w` grid.
pub fn sample_blocks(grid: (usize, usize), cfg: &SwapConfig, rng: &mut StreamRng) -> Result<(Vec<SwapBlock>, usize)> {
    cfg.validate()?;
    let (h, w) = grid;
    let budget = cfg.ratio * (h * w) as f64;
    let mut counter = 0usize;
    let mut blocks = Vec::new();
    while counter as f64 <= budget {
        let upper = (budget - counter as f64).floor();
        if upper < cfg.min_block as f64 {
            break;
        }
        let bs = rng.int_inclusive(cfg.min_block as i64, upper as i64) as f64;
        let ar = rng.real(cfg.min_aspect, 1.0 / cfg.min_aspect);
        let m = ((bs * ar).sqrt().round() as usize).clamp(1, h);
        let n = ((bs / ar).sqrt().round() as usize).clamp(1, w);
        let top = rng.int_inclusive(0, (h - m) as i64) as usize;
        let left = rng.int_inclusive(0, (w - n) as i64) as usize;
        blocks.push(SwapBlock { top, left, rows: m, cols: n });
        counter += m * n;
    }
    Ok((blocks, counter))
}

pub fn blockwise_swap(pt: &PatchSequence, ptd: &PatchSequence, cfg: &SwapConfig, seed: u64) -> Result<SwapRecord> {
    if !pt.same_layout(ptd) {
        return Err(Error::Tensor(mubert_tensor::TensorError::Shape {
            op: "blockwise_swap",
            lhs: vec![pt.grid().0, pt.grid().1, pt.patch_len()],
            rhs: vec![ptd.grid().0, ptd.grid().1, ptd.patch_len()],
        }));
    }
    let (h, w) = pt.grid();
    let mut rng = StreamRng::from_seed(seed);
    let (blocks, counter) = sample_blocks((h, w), cfg, &mut rng)?;
    let mut swapped = pt.clone();
    let mut mask = vec![false; h * w];
    for b in &blocks {
        for i in b.top..b.top + b.rows {
            for j in b.left..b.left + b.cols {
                let k = i * w + j;
                swapped.patch_mut(k).copy_from_slice(ptd.patch(k));
                mask[k] = true;
            }
        }
    }
    Ok(SwapRecord { swapped, mask, blocks, counter, seed })
}

/// Renders a patch mask at pixel resolution: 1.0 (255 in PGM) for swapped
/// patches.
pub fn mask_image(mask: &[bool], grid: (usize, usize), patch_size: usize) -> Image {
    let (h, w) = grid;
    Image::from_fn(h * patch_size, w * patch_size, 1, |y, x, _| {
        if mask[(y / patch_size) * w + x / patch_size] {
            1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(grid: usize, value: f32) -> PatchSequence {
        PatchSequence::new(grid, grid, 2, 1, vec![value; grid * grid * 4]).unwrap()
    }

    fn numbered(grid: usize, offset: f32) -> PatchSequence {
        let data = (0..grid * grid * 4).map(|i| offset + (i / 4) as f32).collect();
        PatchSequence::new(grid, grid, 2, 1, data).unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let cfg = SwapConfig { ratio: 0.0, min_block: 4, min_aspect: 0.3 };
        let r = blockwise_swap(&seq(8, 0.0), &seq(8, 1.0), &cfg, 11).unwrap();
        assert_eq!(r.swapped, seq(8, 0.0));
        assert!(r.mask.iter().all(|&m| !m));
    }

    #[test]
    fn degenerate_budget_swaps_nothing() {
        let cfg = SwapConfig { ratio: 0.1, min_block: 16, min_aspect: 0.3 };
        let r = blockwise_swap(&seq(8, 0.0), &seq(8, 1.0), &cfg, 3).unwrap();
        assert_eq!(r.swapped_count(), 0);
    }

    #[test]
    fn published_config_swaps_about_half() {
        let cfg = SwapConfig::default();
        let mut total = 0.0;
        for seed in 0..50 {
            let r = blockwise_swap(&seq(28, 0.0), &seq(28, 1.0), &cfg, seed).unwrap();
            assert!(r.swapped_count() <= r.counter);
            total += r.swapped_count() as f64 / 784.0;
        }
        let mean = total / 50.0;
        assert!((0.3..=0.6).contains(&mean), "mean swapped fraction {mean}");
    }

    #[test]
    fn mask_is_sound_and_values_match_sources() {
        let cfg = SwapConfig { ratio: 0.5, min_block: 4, min_aspect: 0.3 };
        let (a, b) = (numbered(8, 0.0), numbered(8, 100.0));
        for seed in 0..20 {
            let r = blockwise_swap(&a, &b, &cfg, seed).unwrap();
            for k in 0..64 {
                let expect = if r.mask[k] { b.patch(k) } else { a.patch(k) };
                assert_eq!(r.swapped.patch(k), expect);
            }
            assert!(r.swapped_count() <= r.counter);
            assert!(r.swapped_count() <= 64);
        }
    }

    #[test]
    fn identical_frames_are_unchanged_and_runs_repeat() {
        let cfg = SwapConfig { ratio: 0.5, min_block: 4, min_aspect: 0.3 };
        let a = numbered(8, 0.0);
        let r = blockwise_swap(&a, &a, &cfg, 5).unwrap();
        assert_eq!(r.swapped, a);
        assert_eq!(r, blockwise_swap(&a, &a, &cfg, 5).unwrap());
    }

    #[test]
    fn invalid_inputs() {
        let cfg = SwapConfig { ratio: 1.5, ..SwapConfig::default() };
        assert!(matches!(blockwise_swap(&seq(4, 0.0), &seq(4, 1.0), &cfg, 0), Err(Error::Config(_))));
        let cfg = SwapConfig::default();
        assert!(blockwise_swap(&seq(4, 0.0), &seq(5, 1.0), &cfg, 0).is_err());
    }

    #[test]
    fn mask_renders_at_pixel_scale() {
        let img = mask_image(&[true, false, false, true], (2, 2), 3);
        assert_eq!((img.height(), img.width()), (6, 6));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 3, 0), 0.0);
        assert_eq!(img.get(5, 5, 0), 1.0);
    }
}

//! Non-overlapping patch tiling and patch embedding.
//!
//! Patches are ordered row-major over the `h × w` patch grid, so patch
//! `k` sits at grid cell `(k / w, k % w)`. Inside a patch, values are
//! ordered by pixel row, pixel column, then channel.

use mubert_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Bound, Linear, ParamId};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
    channels: usize,
    data: Vec<f32>,
    /// Frame index the patches came from.
    pub frame: u64,
}

impl PatchSequence {
    pub fn new(grid_h: usize, grid_w: usize, patch_size: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expect = grid_h * grid_w * patch_size * patch_size * channels;
        if data.len() != expect {
            return Err(Error::data(format!(
                "{grid_h}x{grid_w} grid of {patch_size}px patches with {channels} channels needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Self { grid_h, grid_w, patch_size, channels, data, frame: 0 })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of patches `N_p`.
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values per patch, `ps² · C`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let l = self.patch_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.patch_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn same_layout(&self, other: &PatchSequence) -> bool {
        self.grid_h == other.grid_h
            && self.grid_w == other.grid_w
            && self.patch_size == other.patch_size
            && self.channels == other.channels
    }

    /// `[N_p × ps²C]` matrix.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![self.len(), self.patch_len()], |i| T::lit(self.data[i] as f64))
    }

    /// Rebuilds a sequence with this layout from a `[N_p × ps²C]` matrix.
    pub fn with_rows<T: Real>(&self, rows: &Tensor<T>) -> Result<PatchSequence> {
        if rows.shape() != [self.len(), self.patch_len()] {
            return Err(Error::Tensor(mubert_tensor::TensorError::Shape {
                op: "with_rows",
                lhs: rows.shape().to_vec(),
                rhs: vec![self.len(), self.patch_len()],
            }));
        }
        let data = rows.data().iter().map(|v| v.as_f64() as f32).collect();
        PatchSequence::new(self.grid_h, self.grid_w, self.patch_size, self.channels, data)
    }
}

pub fn check_divisible(height: usize, width: usize, ps: usize) -> Result<()> {
    if ps == 0 || !height.is_multiple_of(ps) || !width.is_multiple_of(ps) {
        return Err(Error::config(format!("image {height}x{width} is not divisible into {ps}px patches")));
    }
    Ok(())
}

pub fn patchify(img: &Image, ps: usize) -> Result<PatchSequence> {
    check_divisible(img.height(), img.width(), ps)?;
    let (gh, gw, c) = (img.height() / ps, img.width() / ps, img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..ps {
                let y = gy * ps + py;
                let start = (y * img.width() + gx * ps) * c;
                data.extend_from_slice(&img.data()[start..start + ps * c]);
            }
        }
    }
    PatchSequence::new(gh, gw, ps, c, data)
}

pub fn unpatchify(patches: &PatchSequence) -> Image {
    let (gh, gw) = patches.grid();
    let (ps, c) = (patches.patch_size, patches.channels);
    let width = gw * ps;
    let mut img = Image::zeros(gh * ps, width, c);
    for k in 0..patches.len() {
        let (gy, gx) = (k / gw, k % gw);
        let src = patches.patch(k);
        for py in 0..ps {
            let y = gy * ps + py;
            let start = (y * width + gx * ps) * c;
            img.data_mut()[start..start + ps * c].copy_from_slice(&src[py * ps * c..(py + 1) * ps * c]);
        }
    }
    img
}

/// Fixed sinusoidal table: `sin(pos / 10000^(2k/d))` in column `2k`, the
/// matching cosine in column `2k+1`.
pub fn positional_table<T: Real>(n_rows: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) {
        return Err(Error::config(format!("positional width must be even, got {d}")));
    }
    Ok(Tensor::from_fn(vec![n_rows, d], |i| {
        let (pos, col) = (i / d, i % d);
        let k = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
        T::lit(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Patch projection plus the optional learnable contextual token.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub proj: Linear,
    pub contextual_token: Option<ParamId>,
}

/// Embeds a `[N_p × ps²C]` patch matrix. With a contextual token the
/// output has `N_p + 1` rows: the token plus positional row 0 first, then
/// patch `i` at row `i + 1` with positional row `i + 1`.
pub fn embed<T: Real>(g: &mut Graph<T>, p: &Bound, params: &EmbedParams, patches: Var, pos: &Tensor<T>) -> Result<Var> {
    let (n, width) = g.value(patches).dims2("embed")?;
    if width != params.proj.in_dim {
        return Err(Error::Tensor(mubert_tensor::TensorError::Shape {
            op: "embed",
            lhs: vec![n, width],
            rhs: vec![params.proj.in_dim, params.proj.out_dim],
        }));
    }
    let projected = params.proj.forward(g, p, patches)?;
    let seq = match params.contextual_token {
        Some(ct) => {
            let tok = g.reshape(p[ct], vec![1, params.proj.out_dim])?;
            g.concat_rows(&[tok, projected])?
        }
        None => projected,
    };
    let rows = g.shape(seq)[0];
    if pos.shape()[0] < rows || pos.shape()[1] != params.proj.out_dim {
        return Err(Error::config(format!(
            "positional table {:?} too small for {rows} rows of width {}",
            pos.shape(),
            params.proj.out_dim
        )));
    }
    let table = if pos.shape()[0] == rows {
        pos.clone()
    } else {
        Tensor::new(vec![rows, pos.shape()[1]], pos.data()[..rows * pos.shape()[1]].to_vec())?
    };
    let table = g.constant(table);
    Ok(g.add(seq, table)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |y, x, ch| ((y * w + x) * c + ch) as f32 / (h * w * c) as f32)
    }

    #[test]
    fn published_geometry_patch_count() {
        let img = Image::zeros(224, 224, 3);
        assert_eq!(patchify(&img, 8).unwrap().len(), 784);
    }

    #[test]
    fn single_patch_is_the_image() {
        let img = ramp(8, 8, 1);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.patch(0), img.data());
        assert_eq!(unpatchify(&p), img);
    }

    #[test]
    fn round_trip_and_row_major_order() {
        let img = ramp(16, 16, 3);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(unpatchify(&p), img);
        // Patch 1 is the top-right tile.
        assert_eq!(p.patch(1)[0], img.get(0, 8, 0));
        assert_eq!(p.patch(2)[0], img.get(8, 0, 0));
        let zeros = PatchSequence::new(2, 2, 8, 1, vec![0.0; 256]).unwrap();
        assert!(unpatchify(&zeros).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_divisible_is_config_error() {
        assert!(matches!(patchify(&Image::zeros(10, 16, 1), 8), Err(Error::Config(_))));
        assert!(PatchSequence::new(2, 2, 8, 1, vec![0.0; 10]).is_err());
    }

    #[test]
    fn positional_table_examples() {
        let t = positional_table::<f64>(3, 4).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.at2(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        assert!(matches!(positional_table::<f64>(2, 5), Err(Error::Config(_))));
    }
}

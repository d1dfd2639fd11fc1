//! Heatmap images of per-patch maps.

use std::path::{Path, PathBuf};

use crate::data::pnm::save_image;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::train::SpotMaps;

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 && span.is_finite() { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Normalized map on a `grid`, each cell blown up to `scale × scale` pixels.
pub fn heatmap(values: &[f64], grid: (usize, usize), scale: usize) -> Result<Image> {
    if values.len() != grid.0 * grid.1 {
        return Err(Error::usage(format!("{} values do not fill a {}x{} grid", values.len(), grid.0, grid.1)));
    }
    let norm = min_max(values);
    Ok(Image::from_fn(grid.0 * scale, grid.1 * scale, 1, |y, x, _| norm[(y / scale) * grid.1 + x / scale] as f32))
}

fn with_channels(img: &Image, channels: usize) -> Image {
    if img.channels() == channels {
        return img.clone();
    }
    Image::from_fn(img.height(), img.width(), channels, |y, x, _| {
        (0..img.channels()).map(|k| img.get(y, x, k)).sum::<f32>() / img.channels() as f32
    })
}

/// Panels laid out left to right, separated by 2 white pixels.
pub fn side_by_side(panels: &[Image]) -> Image {
    let gap = 2;
    let h = panels.iter().map(Image::height).max().unwrap_or(0);
    let channels = panels.iter().map(Image::channels).max().unwrap_or(1);
    let w = panels.iter().map(Image::width).sum::<usize>() + gap * panels.len().saturating_sub(1);
    let mut out = Image::filled(h, w, channels, 1.0);
    let mut left = 0;
    for p in panels {
        let p = with_channels(p, channels);
        for y in 0..p.height() {
            for x in 0..p.width() {
                for c in 0..channels {
                    out.set(y, left + x, c, p.get(y, x, c));
                }
            }
        }
        left += p.width() + gap;
    }
    out
}

/// Writes `diagonal.pgm`, `saliency.pgm` (when present), `combined.pgm`
/// and a `composite` of onset, apex and the maps. Returns written paths.
pub fn write_spot(dir: &Path, maps: &SpotMaps, onset: &Image, apex: &Image) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scale = onset.height() / maps.grid.0;
    let mut written = Vec::new();
    let mut panels = vec![onset.clone(), apex.clone()];
    let mut put = |name: &str, values: &[f64], panels: &mut Vec<Image>| -> Result<()> {
        let img = heatmap(values, maps.grid, scale)?;
        let path = dir.join(name);
        save_image(&img, &path)?;
        written.push(path);
        panels.push(img);
        Ok(())
    };
    put("diagonal.pgm", &maps.diagonal, &mut panels)?;
    if let Some(s) = &maps.saliency {
        put("saliency.pgm", s, &mut panels)?;
    }
    put("combined.pgm", &maps.combined, &mut panels)?;
    let composite = side_by_side(&panels);
    let ext = if composite.channels() == 1 { "pgm" } else { "ppm" };
    let path = dir.join(format!("composite.{ext}"));
    save_image(&composite, &path)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(min_max(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max(&[5.0, 5.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn upsampling_is_nearest_neighbour() {
        let img = heatmap(&[0.0, 1.0, 2.0, 3.0], (2, 2), 4).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(3, 7, 0), 1.0 / 3.0);
        assert_eq!(img.get(7, 7, 0), 1.0);
        assert!(heatmap(&[1.0], (2, 2), 1).is_err());
    }

    #[test]
    fn composite_layout() {
        let a = Image::filled(4, 4, 3, 0.2);
        let b = Image::filled(4, 4, 1, 0.8);
        let c = side_by_side(&[a, b]);
        assert_eq!((c.height(), c.width(), c.channels()), (4, 10, 3));
        assert_eq!(c.get(0, 4, 0), 1.0);
        assert_eq!(c.get(0, 6, 2), 0.8);
    }
}

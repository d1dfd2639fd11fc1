use crate::error::{Error, Result};

/// Height × width × channels image, interleaved row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::data(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample at real coordinates with edge clamping.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f32 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = (y - y0 as f64) as f32;
        let fx = (x - x0 as f64) as f32;
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize of the window `[top, top+h) × [left, left+w)` to
    /// `out_h × out_w`, using half-pixel centres. A full-frame window at the
    /// original size reproduces the image exactly.
    pub fn resize_window(&self, top: usize, left: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        Image::from_fn(out_h, out_w, self.channels, |y, x, c| {
            let src_y = top as f64 + (y as f64 + 0.5) * sy - 0.5;
            let src_x = left as f64 + (x as f64 + 0.5) * sx - 0.5;
            let src_y = src_y.clamp(top as f64, (top + h - 1) as f64);
            let src_x = src_x.clamp(left as f64, (left + w - 1) as f64);
            self.sample_bilinear(src_y, src_x, c)
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        self.resize_window(0, 0, self.height, self.width, out_h, out_w)
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Mean squared difference, in double precision.
    pub fn mse(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / n
    }
}

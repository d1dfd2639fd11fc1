//! Synthetic micro-motion benchmark: a textured background, one smooth
//! "subject" blob, and small patch-aligned motions injected into the later
//! frame with an exact ground-truth mask.

use std::path::Path;

use crate::data::pnm::load_image;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::patch::check_divisible;
use crate::rng::{mix_seed, StreamRng};

/// Rectangle in patch-grid coordinates, rows `r0..r1`, columns `c0..c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl PatchRect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }

    pub fn rows(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn cols(&self) -> usize {
        self.c1 - self.c0
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Row-major patch mask of this rectangle on a `grid`.
    pub fn mask(&self, grid: (usize, usize)) -> Vec<bool> {
        (0..grid.0 * grid.1).map(|k| self.contains(k / grid.1, k % grid.1)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePairSample {
    pub frame_t: Image,
    pub frame_td: Image,
    pub delta: i64,
    /// Row-major patch mask of injected motion, when known.
    pub motion_mask: Option<Vec<bool>>,
    pub label: Option<usize>,
    pub subject: Option<PatchRect>,
}

/// How motion regions are placed inside the subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Anywhere inside the subject.
    Random,
    /// The layout of one class signature.
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Subject side as a fraction of the frame side.
    pub subject_frac: (f64, f64),
    /// Peak intensity change of a motion region, at the largest `delta`.
    pub amplitude: (f64, f64),
    /// Peak displacement in pixels, at the largest `delta`.
    pub shift: (f64, f64),
    /// Number of moved regions per unlabeled pair.
    pub regions: (usize, usize),
    pub delta: (i64, i64),
    /// Standard deviation of independent per-pixel noise added to each frame.
    pub noise_std: f64,
    /// Largest permitted per-patch MSE between frames, before noise.
    pub micro_ceiling: f64,
    pub classes: usize,
    pub texture_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            patch_size: 8,
            subject_frac: (0.4, 0.55),
            amplitude: (0.10, 0.18),
            shift: (0.6, 1.2),
            regions: (1, 4),
            delta: (5, 11),
            noise_std: 0.0,
            micro_ceiling: 0.02,
            classes: 3,
            texture_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible(self.image_size, self.image_size, self.patch_size)?;
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        let ordered = |(lo, hi): (f64, f64), name: &str| {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                Err(Error::config(format!("{name} range ({lo}, {hi}) is invalid")))
            } else {
                Ok(())
            }
        };
        ordered(self.subject_frac, "subject fraction")?;
        ordered(self.amplitude, "amplitude")?;
        ordered(self.shift, "shift")?;
        if self.subject_frac.1 > 1.0 {
            return Err(Error::config("subject fraction above 1"));
        }
        if self.regions.0 < 1 || self.regions.0 > self.regions.1 {
            return Err(Error::config(format!("region count range {:?} is invalid", self.regions)));
        }
        if self.delta.0 < 1 || self.delta.0 > self.delta.1 {
            return Err(Error::config(format!("delta range {:?} is invalid", self.delta)));
        }
        if self.noise_std < 0.0 || self.micro_ceiling <= 0.0 {
            return Err(Error::config("noise and micro ceiling must be nonnegative and positive"));
        }
        Ok(())
    }
}

/// Patch cells moved by one class signature inside `subject`.
fn class_cells(class: usize, s: &PatchRect) -> Vec<(usize, usize)> {
    let mid = s.c0 + s.cols() / 2;
    match class % 3 {
        0 => vec![(s.r0, mid.saturating_sub(1).max(s.c0)), (s.r0, mid)],
        1 => vec![(s.r1 - 1, mid.saturating_sub(1).max(s.c0)), (s.r1 - 1, mid)],
        _ => {
            let r = s.r0 + s.rows() / 2;
            vec![(r, s.c0), (r, s.c1 - 1)]
        }
    }
}

/// `(brightness sign, shift direction)` of a class signature.
fn class_motion(class: usize) -> (f64, (f64, f64)) {
    match class % 3 {
        0 => (1.0, (-1.0, 0.0)),
        1 => (-1.0, (0.0, 1.0)),
        _ => (1.0, (1.0, 0.0)),
    }
}

struct Scene {
    image: Image,
    subject: PatchRect,
}

fn render_scene(cfg: &GenConfig, rng: &mut StreamRng) -> Scene {
    let n = cfg.image_size;
    let grid = cfg.grid();
    let mut tex = StreamRng::new(mix_seed(cfg.texture_seed, rng.next_word()), 3);

    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            let angle = tex.real(0.0, std::f64::consts::PI);
            let freq = tex.real(0.25, 0.9);
            [angle.cos() * freq, angle.sin() * freq, tex.real(0.0, std::f64::consts::TAU), tex.real(0.03, 0.08)]
        })
        .collect();
    let base = tex.real(0.3, 0.45);
    let clutter: Vec<[f64; 4]> = (0..tex.int_inclusive(3, 6))
        .map(|_| [tex.real(0.0, n as f64), tex.real(0.0, n as f64), tex.real(2.0, 6.0), tex.real(-0.15, 0.15)])
        .collect();

    let side = ((cfg.subject_frac.0 + (cfg.subject_frac.1 - cfg.subject_frac.0) * rng.unit()) * grid as f64)
        .round()
        .clamp(2.0, grid as f64) as usize;
    let margin = usize::from(grid >= side + 2);
    let r0 = rng.int_inclusive(margin as i64, (grid - side - margin) as i64) as usize;
    let c0 = rng.int_inclusive(margin as i64, (grid - side - margin) as i64) as usize;
    let subject = PatchRect { r0, c0, r1: r0 + side, c1: c0 + side };

    let ps = cfg.patch_size as f64;
    let (cy, cx) = ((r0 as f64 + side as f64 / 2.0) * ps, (c0 as f64 + side as f64 / 2.0) * ps);
    let radius = side as f64 * ps / 2.0;
    let subject_level = rng.real(0.72, 0.85);
    let tilt = (rng.real(-0.08, 0.08), rng.real(-0.08, 0.08));
    let spots: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.real(-0.5, 0.5) * radius, rng.real(-0.5, 0.5) * radius, rng.real(0.15, 0.3) * radius])
        .collect();
    let tint: Vec<f64> = (0..cfg.channels).map(|_| rng.real(0.9, 1.1)).collect();

    let image = Image::from_fn(n, n, cfg.channels, |y, x, c| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut bg = base;
        for w in &waves {
            bg += w[3] * (w[0] * yf + w[1] * xf + w[2]).sin();
        }
        for k in &clutter {
            let d2 = ((yf - k[0]).powi(2) + (xf - k[1]).powi(2)) / (k[2] * k[2]);
            bg += k[3] * (-d2).exp();
        }
        let (dy, dx) = ((yf - cy) / radius, (xf - cx) / radius);
        let r = (dy * dy + dx * dx).sqrt();
        let blend = 1.0 / (1.0 + ((r - 0.92) * 14.0).exp());
        let mut fg = subject_level + tilt.0 * dy + tilt.1 * dx;
        for s in &spots {
            let d2 = ((yf - cy - s[0]).powi(2) + (xf - cx - s[1]).powi(2)) / (s[2] * s[2]);
            fg -= 0.25 * (-d2).exp();
        }
        let v = (bg * (1.0 - blend) + fg * blend) * tint[c];
        v.clamp(0.0, 1.0) as f32
    });
    Scene { image, subject }
}

/// Moves `cells` of `src` with a smooth bump profile: the intensity changes
/// by up to `amp` and content is displaced by up to `shift` pixels.
fn inject_motion(src: &Image, cells: &[(usize, usize)], ps: usize, amp: f64, shift: (f64, f64)) -> Image {
    let mut out = src.clone();
    for &(r, c) in cells {
        for y in r * ps..(r + 1) * ps {
            for x in c * ps..(c + 1) * ps {
                let u = (y - r * ps) as f64 + 0.5;
                let v = (x - c * ps) as f64 + 0.5;
                let bump = (std::f64::consts::PI * u / ps as f64).sin() * (std::f64::consts::PI * v / ps as f64).sin();
                let (sy, sx) = (y as f64 - shift.0 * bump, x as f64 - shift.1 * bump);
                for ch in 0..src.channels() {
                    let val = src.sample_bilinear(sy, sx, ch) as f64 + amp * bump;
                    out.set(y, x, ch, val.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    out
}

fn per_patch_mse(a: &Image, b: &Image, ps: usize) -> Vec<f64> {
    let (gh, gw) = (a.height() / ps, a.width() / ps);
    let mut out = vec![0.0; gh * gw];
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..a.channels() {
                let d = (a.get(y, x, c) - b.get(y, x, c)) as f64;
                out[(y / ps) * gw + x / ps] += d * d;
            }
        }
    }
    let n = (ps * ps * a.channels()) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

fn add_noise(img: &mut Image, std: f64, rng: &mut StreamRng) {
    if std == 0.0 {
        return;
    }
    for v in img.data_mut() {
        *v = (*v as f64 + std * rng.normal()).clamp(0.0, 1.0) as f32;
    }
}

/// Mean per-patch frame-difference energy, split by the motion mask.
pub fn masked_energy(sample: &FramePairSample, ps: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let mask = sample.motion_mask.as_ref()?;
    let e = per_patch_mse(&sample.frame_t, &sample.frame_td, ps);
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for (k, &m) in mask.iter().enumerate() {
        if m {
            on.push(e[k]);
        } else {
            off.push(e[k]);
        }
    }
    Some((on, off))
}

fn build_pair(cfg: &GenConfig, seed: u64, placement: Placement, amplitude_scale: f64) -> Result<FramePairSample> {
    cfg.validate()?;
    let mut rng = StreamRng::new(seed, 1);
    let scene = render_scene(cfg, &mut rng);
    let grid = cfg.grid();
    let s = scene.subject;
    let delta = rng.int_inclusive(cfg.delta.0, cfg.delta.1);
    let ramp = delta as f64 / cfg.delta.1 as f64;

    let (cells, sign, dir) = match placement {
        Placement::Class(k) => {
            if k >= cfg.classes {
                return Err(Error::Generation(format!("class {k} outside {} classes", cfg.classes)));
            }
            let (sign, dir) = class_motion(k);
            (class_cells(k, &s), sign, dir)
        }
        Placement::Random => {
            let want = rng.int_inclusive(cfg.regions.0 as i64, cfg.regions.1 as i64) as usize;
            if want > s.area() {
                return Err(Error::Generation(format!(
                    "subject of {} patches cannot hold {want} motion regions",
                    s.area()
                )));
            }
            let mut cells = Vec::with_capacity(want);
            while cells.len() < want {
                let cell = (s.r0 + rng.index(s.rows()), s.c0 + rng.index(s.cols()));
                if !cells.contains(&cell) {
                    cells.push(cell);
                }
            }
            let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let angle = rng.real(0.0, 2.0 * std::f64::consts::PI);
            (cells, sign, (angle.sin(), angle.cos()))
        }
    };
    let amp = rng.real(cfg.amplitude.0, cfg.amplitude.1) * ramp * amplitude_scale * sign;
    let mag = rng.real(cfg.shift.0, cfg.shift.1) * ramp * amplitude_scale;
    let moved = inject_motion(&scene.image, &cells, cfg.patch_size, amp, (dir.0 * mag, dir.1 * mag));

    let mut mask = vec![false; grid * grid];
    for &(r, c) in &cells {
        mask[r * grid + c] = true;
    }
    let energy = per_patch_mse(&scene.image, &moved, cfg.patch_size);
    if amplitude_scale > 0.0 {
        let peak = energy.iter().cloned().fold(0.0, f64::max);
        if peak > cfg.micro_ceiling {
            return Err(Error::Generation(format!(
                "patch MSE {peak:.4} exceeds the micro ceiling {}",
                cfg.micro_ceiling
            )));
        }
        let masked_min = cells.iter().map(|&(r, c)| energy[r * grid + c]).fold(f64::INFINITY, f64::min);
        let unmasked_max = (0..grid * grid).filter(|&k| !mask[k]).map(|k| energy[k]).fold(0.0, f64::max);
        if masked_min <= unmasked_max {
            return Err(Error::Generation("injected motion is invisible in a masked patch".into()));
        }
    } else {
        mask.iter_mut().for_each(|m| *m = false);
    }

    let mut frame_t = scene.image;
    let mut frame_td = moved;
    let mut noise = StreamRng::new(seed, 2);
    add_noise(&mut frame_t, cfg.noise_std, &mut noise);
    add_noise(&mut frame_td, cfg.noise_std, &mut noise);
    Ok(FramePairSample {
        frame_t,
        frame_td,
        delta,
        motion_mask: Some(mask),
        label: match placement {
            Placement::Class(k) => Some(k),
            Placement::Random => None,
        },
        subject: Some(s),
    })
}

/// One unlabeled pair with motion anywhere inside the subject.
pub fn generate_pair(cfg: &GenConfig, seed: u64) -> Result<FramePairSample> {
    build_pair(cfg, seed, Placement::Random, 1.0)
}

/// As [`generate_pair`] with motion amplitudes multiplied by `scale`;
/// `scale = 0` gives identical frames (before noise) and an empty mask.
pub fn generate_pair_scaled(cfg: &GenConfig, seed: u64, scale: f64) -> Result<FramePairSample> {
    build_pair(cfg, seed, Placement::Random, scale)
}

pub fn generate_labeled(cfg: &GenConfig, seed: u64, class: usize) -> Result<FramePairSample> {
    build_pair(cfg, seed, Placement::Class(class), 1.0)
}

/// `n_per_class` samples of every class, interleaved by class.
pub fn generate_labeled_set(cfg: &GenConfig, n_per_class: usize, seed: u64) -> Result<Vec<FramePairSample>> {
    if cfg.classes < 2 {
        return Err(Error::config("a labeled set needs at least 2 classes"));
    }
    if n_per_class < 1 {
        return Err(Error::config("a labeled set needs at least 1 sample per class"));
    }
    let mut out = Vec::with_capacity(n_per_class * cfg.classes);
    for i in 0..n_per_class {
        for k in 0..cfg.classes {
            let idx = (i * cfg.classes + k) as u64;
            out.push(generate_labeled(cfg, mix_seed(seed, idx), k)?);
        }
    }
    Ok(out)
}

/// Crop with area fraction in `area` and aspect in `[3/4, 4/3]`, resized
/// back to the input size. The aspect range is narrowed so the crop always
/// fits; a full-area crop is the whole frame.
pub fn random_crop_resize(img: &Image, area: (f64, f64), rng: &mut StreamRng) -> Result<Image> {
    let (lo, hi) = area;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::config(format!("crop area range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
    }
    let (h, w) = (img.height(), img.width());
    let a = rng.real(lo, hi);
    let ar = rng.real((0.75f64).max(a), (4.0 / 3.0f64).min(1.0 / a));
    let ch = ((h as f64 * (a * ar).sqrt()).round() as usize).clamp(1, h);
    let cw = ((w as f64 * (a / ar).sqrt()).round() as usize).clamp(1, w);
    let top = rng.int_inclusive(0, (h - ch) as i64) as usize;
    let left = rng.int_inclusive(0, (w - cw) as i64) as usize;
    Ok(img.resize_window(top, left, ch, cw, h, w))
}

/// Reads an unlabeled pair from PGM/PPM files.
pub fn load_frame_pair(path_t: &Path, path_td: &Path, patch_size: usize, delta: i64) -> Result<FramePairSample> {
    let frame_t = load_image(path_t)?;
    let frame_td = load_image(path_td)?;
    if !frame_t.same_geometry(&frame_td) {
        return Err(Error::Data {
            path: Some(path_td.to_path_buf()),
            line: None,
            msg: format!(
                "frame is {}x{}x{}, its pair is {}x{}x{}",
                frame_td.height(),
                frame_td.width(),
                frame_td.channels(),
                frame_t.height(),
                frame_t.width(),
                frame_t.channels()
            ),
        });
    }
    check_divisible(frame_t.height(), frame_t.width(), patch_size).map_err(|e| Error::Data {
        path: Some(path_t.to_path_buf()),
        line: None,
        msg: e.to_string(),
    })?;
    Ok(FramePairSample { frame_t, frame_td, delta, motion_mask: None, label: None, subject: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_gives_identical_frames() {
        let cfg = GenConfig::default();
        let s = generate_pair_scaled(&cfg, 4, 0.0).unwrap();
        assert_eq!(s.frame_t, s.frame_td);
        assert!(s.motion_mask.unwrap().iter().all(|&m| !m));
    }

    #[test]
    fn motion_stays_inside_subject_and_dominates() {
        let cfg = GenConfig::default();
        for seed in 0..40 {
            let s = generate_pair(&cfg, seed).unwrap();
            let grid = cfg.grid();
            let mask = s.motion_mask.as_ref().unwrap();
            let subject = s.subject.unwrap();
            for (k, &m) in mask.iter().enumerate() {
                if m {
                    assert!(subject.contains(k / grid, k % grid));
                }
            }
            let (on, off) = masked_energy(&s, cfg.patch_size).unwrap();
            assert!(!on.is_empty());
            assert!(off.iter().all(|&e| e == 0.0));
            assert!(on.iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(generate_pair(&cfg, 17).unwrap(), generate_pair(&cfg, 17).unwrap());
        assert_ne!(generate_pair(&cfg, 17).unwrap(), generate_pair(&cfg, 18).unwrap());
    }

    #[test]
    fn noise_perturbs_every_patch() {
        let cfg = GenConfig { noise_std: 0.02, ..GenConfig::default() };
        let s = generate_pair(&cfg, 3).unwrap();
        let (_, off) = masked_energy(&s, cfg.patch_size).unwrap();
        assert!(off.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn labeled_set_is_balanced() {
        let cfg = GenConfig::default();
        let set = generate_labeled_set(&cfg, 10, 1).unwrap();
        assert_eq!(set.len(), 30);
        for k in 0..3 {
            assert_eq!(set.iter().filter(|s| s.label == Some(k)).count(), 10);
        }
        assert_eq!(set, generate_labeled_set(&cfg, 10, 1).unwrap());
        assert!(generate_labeled_set(&cfg, 0, 1).is_err());
        let two = GenConfig { classes: 1, ..cfg };
        assert!(generate_labeled_set(&two, 3, 1).is_err());
    }

    #[test]
    fn too_many_regions_is_a_generation_error() {
        let cfg = GenConfig { regions: (20, 20), ..GenConfig::default() };
        assert!(matches!(generate_pair(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn crops() {
        let img = Image::from_fn(16, 16, 1, |y, x, _| (y * 16 + x) as f32 / 256.0);
        let mut rng = StreamRng::from_seed(2);
        assert_eq!(random_crop_resize(&img, (1.0, 1.0), &mut rng).unwrap(), img);
        for _ in 0..10 {
            let c = random_crop_resize(&img, (0.6, 0.95), &mut rng).unwrap();
            assert_eq!((c.height(), c.width(), c.channels()), (16, 16, 1));
        }
        let flat = Image::filled(16, 16, 3, 0.4);
        let c = random_crop_resize(&flat, (0.6, 0.95), &mut rng).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert!(random_crop_resize(&img, (0.0, 0.5), &mut rng).is_err());
    }
}

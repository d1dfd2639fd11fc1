//! Line-oriented dataset manifests.
//!
//! One record per line, whitespace separated:
//!
//! ```text
//! <frame_t> <frame_td> <delta> <label|-> <mask|-> [r0,c0,r1,c1]
//! ```
//!
//! Paths are relative to the manifest's directory. The mask is a PGM at
//! frame resolution, nonzero where motion was injected. The optional last
//! field is the subject rectangle in patch coordinates. Blank lines and
//! lines starting with `#` are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::pnm::{load_image, save_image};
use crate::data::synth::{load_frame_pair, FramePairSample, PatchRect};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::swap::mask_image;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub frame_t: PathBuf,
    pub frame_td: PathBuf,
    pub delta: i64,
    pub label: Option<usize>,
    pub mask: Option<PathBuf>,
    pub subject: Option<PatchRect>,
}

impl ManifestRecord {
    fn to_line(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {}",
            self.frame_t.display(),
            self.frame_td.display(),
            self.delta,
            self.label.map_or("-".to_string(), |l| l.to_string()),
            self.mask.as_ref().map_or("-".to_string(), |m| m.display().to_string()),
        );
        if let Some(r) = self.subject {
            s.push_str(&format!(" {},{},{},{}", r.r0, r.c0, r.r1, r.c1));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

fn field_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Data { path: Some(path.to_path_buf()), line: Some(line), msg }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let n = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 && f.len() != 6 {
            return Err(field_err(path, n, format!("expected 5 or 6 fields, found {}", f.len())));
        }
        let delta = f[2].parse().map_err(|_| field_err(path, n, format!("bad delta {:?}", f[2])))?;
        let label = match f[3] {
            "-" => None,
            s => Some(s.parse().map_err(|_| field_err(path, n, format!("bad label {s:?}")))?),
        };
        let mask = (f[4] != "-").then(|| PathBuf::from(f[4]));
        let subject = match f.get(5) {
            None => None,
            Some(s) => {
                let v: Vec<usize> = s
                    .split(',')
                    .map(|p| p.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| field_err(path, n, format!("bad subject rectangle {s:?}")))?;
                if v.len() != 4 || v[0] >= v[2] || v[1] >= v[3] {
                    return Err(field_err(path, n, format!("bad subject rectangle {s:?}")));
                }
                Some(PatchRect { r0: v[0], c0: v[1], r1: v[2], c1: v[3] })
            }
        };
        out.push(ManifestRecord { frame_t: f[0].into(), frame_td: f[1].into(), delta, label, mask, subject });
    }
    Ok(out)
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = parse_manifest(&text, path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from("# frame_t frame_td delta label mask [subject r0,c0,r1,c1]\n");
        for r in &self.records {
            text.push_str(&r.to_line());
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads record `i` with its images and, when present, its patch mask.
    pub fn sample(&self, i: usize, patch_size: usize) -> Result<FramePairSample> {
        let r = &self.records[i];
        let mut s = load_frame_pair(&self.root.join(&r.frame_t), &self.root.join(&r.frame_td), patch_size, r.delta)?;
        s.label = r.label;
        s.subject = r.subject;
        if let Some(m) = &r.mask {
            let path = self.root.join(m);
            let img = load_image(&path)?;
            if img.height() != s.frame_t.height() || img.width() != s.frame_t.width() {
                return Err(Error::Data {
                    path: Some(path),
                    line: None,
                    msg: "mask size differs from its frames".into(),
                });
            }
            s.motion_mask = Some(patch_mask(&img, patch_size));
        }
        Ok(s)
    }

    pub fn samples(&self, patch_size: usize) -> Result<Vec<FramePairSample>> {
        (0..self.len()).map(|i| self.sample(i, patch_size)).collect()
    }
}

/// Patch mask read from a pixel mask by its patch-centre values.
pub fn patch_mask(img: &Image, ps: usize) -> Vec<bool> {
    let (gh, gw) = (img.height() / ps, img.width() / ps);
    (0..gh * gw).map(|k| img.get((k / gw) * ps + ps / 2, (k % gw) * ps + ps / 2, 0) > 0.5).collect()
}

/// Writes samples as `prefix{i}_t.pgm` / `_td` / `_mask` files under `dir`
/// plus a `manifest.txt`, returning the manifest path.
pub fn write_dataset(dir: &Path, samples: &[FramePairSample], patch_size: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = |img: &Image| if img.channels() == 1 { "pgm" } else { "ppm" };
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let t = PathBuf::from(format!("{i:05}_t.{}", ext(&s.frame_t)));
        let td = PathBuf::from(format!("{i:05}_td.{}", ext(&s.frame_td)));
        save_image(&s.frame_t, dir.join(&t))?;
        save_image(&s.frame_td, dir.join(&td))?;
        let mask = match &s.motion_mask {
            Some(m) => {
                let grid = (s.frame_t.height() / patch_size, s.frame_t.width() / patch_size);
                let p = PathBuf::from(format!("{i:05}_mask.pgm"));
                save_image(&mask_image(m, grid, patch_size), dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        records.push(ManifestRecord { frame_t: t, frame_td: td, delta: s.delta, label: s.label, mask, subject: s.subject });
    }
    let path = dir.join("manifest.txt");
    Manifest { root: dir.to_path_buf(), records }.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_labeled_set, GenConfig};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let samples = generate_labeled_set(&cfg, 2, 9).unwrap();
        let path = write_dataset(dir.path(), &samples, 8).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.len(), 6);
        for (i, orig) in samples.iter().enumerate() {
            let s = m.sample(i, 8).unwrap();
            assert_eq!(s.label, orig.label);
            assert_eq!(s.subject, orig.subject);
            assert_eq!(s.motion_mask, orig.motion_mask);
            assert!(s.frame_t.data().iter().zip(orig.frame_t.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "# header\na.pgm b.pgm 5 - -\na.pgm b.pgm five - -\n";
        let err = parse_manifest(text, Path::new("m.txt")).unwrap_err();
        assert!(err.to_string().contains("m.txt:3"), "{err}");
        assert_eq!(err.exit_code(), 3);
        let ok = parse_manifest("x y 7 2 - 1,1,3,3\n", Path::new("m")).unwrap();
        assert_eq!(ok[0].label, Some(2));
        assert_eq!(ok[0].subject, Some(PatchRect { r0: 1, c0: 1, r1: 3, c1: 3 }));
    }
}

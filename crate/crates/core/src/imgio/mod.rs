//! Dataset ingestion: images, identity/camera labels, foreground masks,
//! color-name lookup tables, train/test splits and the synthetic dataset
//! generator.

mod color_names;
mod splits;
mod synth;

pub use color_names::ColorNameTable;
pub use splits::{
    make_splits, make_splits_labeled, read_id_list, write_id_list, SplitPlan, SplitProtocol,
};
pub use synth::{synthesize_dataset, write_synthetic_dataset, CameraShift, SynthConfig};

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Market-style distractor label: kept in the gallery as a guaranteed
/// non-match.
pub const DISTRACTOR_ID: &str = "-1";
/// Market-style junk label: removed from galleries before ranking.
pub const JUNK_ID: &str = "0000";

/// One pedestrian image with its identity and camera tags.
///
/// Pixels are row-major RGB; the optional mask is row-major booleans of the
/// same size with `true` marking pedestrian foreground. An absent mask means
/// "all foreground".
#[derive(Debug, Clone)]
pub struct PedestrianImage {
    pub id: String,
    pub camera: u32,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
    pub mask: Option<Vec<bool>>,
}

impl PedestrianImage {
    pub fn new(
        id: impl Into<String>,
        camera: u32,
        width: usize,
        height: usize,
        pixels: Vec<[u8; 3]>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let id = id.into();
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Config(format!(
                "image {id}: pixel buffer {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != width * height {
                return Err(Error::MaskSizeMismatch {
                    id,
                    image_w: width,
                    image_h: height,
                    mask_w: m.len(),
                    mask_h: 1,
                });
            }
        }
        Ok(Self {
            id,
            camera,
            width,
            height,
            pixels,
            mask,
        })
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn foreground(&self, x: usize, y: usize) -> bool {
        match &self.mask {
            Some(m) => m[y * self.width + x],
            None => true,
        }
    }

    /// Bilinear resize to `(height, width)`. Returns a new image; masks are
    /// resized by nearest neighbor so they stay boolean.
    pub fn resized(&self, height: usize, width: usize) -> PedestrianImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut pixels = vec![[0u8; 3]; width * height];
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            // Align sample centers: src = (dst + 0.5) * scale - 0.5.
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let mut out = [0u8; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let p00 = self.rgb(x0, y0)[c] as f64;
                    let p10 = self.rgb(x1, y0)[c] as f64;
                    let p01 = self.rgb(x0, y1)[c] as f64;
                    let p11 = self.rgb(x1, y1)[c] as f64;
                    let top = p00 * (1.0 - wx) + p10 * wx;
                    let bot = p01 * (1.0 - wx) + p11 * wx;
                    *o = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
                }
                pixels[y * width + x] = out;
            }
        }
        let mask = self.mask.as_ref().map(|m| {
            let mut out = vec![false; width * height];
            for y in 0..height {
                let sy0 = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize)
                    .min(self.height - 1);
                for x in 0..width {
                    let sx0 = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize)
                        .min(self.width - 1);
                    out[y * width + x] = m[sy0 * self.width + sx0];
                }
            }
            out
        });
        PedestrianImage {
            id: self.id.clone(),
            camera: self.camera,
            width,
            height,
            pixels,
            mask,
        }
    }
}

/// Filename conventions a dataset directory may follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    /// Files named `<id>_cam<k>.<ext>`.
    PairFolders,
    /// Files named `<id>_c<k>s<seq>_<frame>...jpg`; distractor id `-1` and
    /// junk id `0000` are recognized and kept tagged.
    MarketStyle,
    /// A `manifest.jsonl` file with one JSON row per image.
    SyntheticManifest,
}

impl std::str::FromStr for DatasetLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair_folders" => Ok(DatasetLayout::PairFolders),
            "market_style" => Ok(DatasetLayout::MarketStyle),
            "synthetic_manifest" => Ok(DatasetLayout::SyntheticManifest),
            other => Err(Error::Config(format!("unknown dataset layout: {other}"))),
        }
    }
}

/// One row of a synthetic-manifest dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub camera: u32,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

fn is_image_ext(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg" || e == "bmp"
    )
}

fn parse_pair_folders(name: &str) -> Option<(String, u32)> {
    // <id>_cam<k>
    let (id, rest) = name.rsplit_once("_cam")?;
    if id.is_empty() {
        return None;
    }
    let camera: u32 = rest.parse().ok()?;
    Some((id.to_string(), camera))
}

fn parse_market_style(name: &str) -> Option<(String, u32)> {
    // <id>_c<k>s<seq>_<frame>[_<box>]
    let mut parts = name.split('_');
    let id = parts.next()?;
    if id.is_empty() {
        return None;
    }
    let tag = parts.next()?;
    let rest = tag.strip_prefix('c')?;
    let cam_digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if cam_digits.is_empty() {
        return None;
    }
    let camera: u32 = cam_digits.parse().ok()?;
    Some((id.to_string(), camera))
}

fn decode_image(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img
        .pixels()
        .map(|p| [p.0[0], p.0[1], p.0[2]])
        .collect::<Vec<_>>();
    Ok((w, h, pixels))
}

fn load_mask(path: &Path, want_w: usize, want_h: usize, id: &str) -> Result<Vec<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != want_w || h != want_h {
        return Err(Error::MaskSizeMismatch {
            id: id.to_string(),
            image_w: want_w,
            image_h: want_h,
            mask_w: w,
            mask_h: h,
        });
    }
    Ok(img.pixels().map(|p| p.0[0] > 127).collect())
}

/// Load every image under `root` according to `layout`, resize to
/// `target_size = (height, width)` and attach masks from a sibling `masks/`
/// directory when present. Files are visited in sorted order so the result
/// is deterministic.
pub fn load_dataset(
    root: &Path,
    layout: DatasetLayout,
    target_size: (usize, usize),
) -> Result<Vec<PedestrianImage>> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let (th, tw) = target_size;
    if th == 0 || tw == 0 {
        return Err(Error::Config("target size must be nonzero".into()));
    }

    if layout == DatasetLayout::SyntheticManifest {
        return load_manifest_dataset(root, target_size);
    }

    let mut files: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_ext(p))
        .collect();
    files.sort();

    if files.is_empty() {
        eprintln!("warning: no image files found in {}", root.display());
        return Ok(Vec::new());
    }

    let mask_dir = root.join("masks");
    let loaded = crate::exec::map_indexed(files.len(), |i| -> Result<PedestrianImage> {
        let path = &files[i];
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let (id, camera) = match layout {
            DatasetLayout::PairFolders => parse_pair_folders(stem),
            DatasetLayout::MarketStyle => parse_market_style(stem),
            DatasetLayout::SyntheticManifest => unreachable!(),
        }
        .ok_or_else(|| Error::BadFilename {
            layout: format!("{layout:?}"),
            name: stem.to_string(),
        })?;

        let (w, h, pixels) = decode_image(path)?;
        let mask = if mask_dir.is_dir() {
            let mpath = mask_dir.join(path.file_name().unwrap());
            let mpath = if mpath.exists() {
                Some(mpath)
            } else {
                // Allow .png masks next to .jpg images.
                let alt = mask_dir.join(format!("{stem}.png"));
                alt.exists().then_some(alt)
            };
            match mpath {
                Some(p) => Some(load_mask(&p, w, h, &id)?),
                None => None,
            }
        } else {
            None
        };
        let img = PedestrianImage::new(id, camera, w, h, pixels, mask)?;
        Ok(img.resized(th, tw))
    });
    loaded.into_iter().collect()
}

fn load_manifest_dataset(root: &Path, target_size: (usize, usize)) -> Result<Vec<PedestrianImage>> {
    let manifest = root.join("manifest.jsonl");
    if !manifest.is_file() {
        eprintln!(
            "warning: no manifest.jsonl found in {}; empty dataset",
            root.display()
        );
        return Ok(Vec::new());
    }
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut rows = Vec::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::BadFormat {
            path: manifest.clone(),
            reason: format!("line {}: {e}", ln + 1),
        })?;
        rows.push(row);
    }
    let (th, tw) = target_size;
    let loaded = crate::exec::map_indexed(rows.len(), |i| -> Result<PedestrianImage> {
        let row = &rows[i];
        let path = root.join(&row.file);
        let (w, h, pixels) = decode_image(&path)?;
        let mask = match &row.mask {
            Some(m) => Some(load_mask(&root.join(m), w, h, &row.id)?),
            None => None,
        };
        let img = PedestrianImage::new(row.id.clone(), row.camera, w, h, pixels, mask)?;
        Ok(img.resized(th, tw))
    });
    loaded.into_iter().collect()
}

/// Distinct identity labels in sorted order, junk and distractor ids
/// excluded.
pub fn distinct_ids(images: &[PedestrianImage]) -> Vec<String> {
    let mut ids: Vec<String> = images
        .iter()
        .map(|i| i.id.clone())
        .filter(|id| id != DISTRACTOR_ID && id != JUNK_ID)
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(id: &str, camera: u32, w: usize, h: usize, rgb: [u8; 3]) -> PedestrianImage {
        PedestrianImage::new(id, camera, w, h, vec![rgb; w * h], None).unwrap()
    }

    #[test]
    fn parse_layouts() {
        assert_eq!(parse_pair_folders("001_cam0"), Some(("001".into(), 0)));
        assert_eq!(parse_pair_folders("a_b_cam12"), Some(("a_b".into(), 12)));
        assert_eq!(parse_pair_folders("noCamera"), None);
        assert_eq!(
            parse_market_style("0002_c1s1_000451_03"),
            Some(("0002".into(), 1))
        );
        assert_eq!(parse_market_style("-1_c3s2_000001_00"), Some(("-1".into(), 3)));
        assert_eq!(parse_market_style("0002"), None);
    }

    #[test]
    fn empty_directory_yields_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = load_dataset(dir.path(), DatasetLayout::PairFolders, (8, 4)).unwrap();
        assert!(imgs.is_empty());
    }

    #[test]
    fn missing_directory_is_an_error() {
        let err = load_dataset(Path::new("/no/such/dir"), DatasetLayout::PairFolders, (8, 4))
            .unwrap_err();
        assert!(matches!(err, Error::MissingDirectory(_)));
    }

    #[test]
    fn pair_folders_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for (name, color) in [("001_cam0.png", [200u8, 10, 10]), ("001_cam1.png", [10, 200, 10])] {
            let img = image::RgbImage::from_pixel(6, 10, image::Rgb(color));
            img.save(dir.path().join(name)).unwrap();
        }
        let imgs = load_dataset(dir.path(), DatasetLayout::PairFolders, (16, 8)).unwrap();
        assert_eq!(imgs.len(), 2);
        assert!(imgs.iter().all(|i| i.id == "001"));
        let mut cams: Vec<u32> = imgs.iter().map(|i| i.camera).collect();
        cams.sort();
        assert_eq!(cams, vec![0, 1]);
        // resized to target
        assert!(imgs.iter().all(|i| i.height == 16 && i.width == 8));
    }

    #[test]
    fn unparseable_filename_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3]));
        img.save(dir.path().join("noCameraTag.png")).unwrap();
        let err = load_dataset(dir.path(), DatasetLayout::PairFolders, (8, 4)).unwrap_err();
        assert!(matches!(err, Error::BadFilename { .. }));
    }

    #[test]
    fn market_style_files_load_with_junk_and_distractors() {
        let dir = tempfile::tempdir().unwrap();
        for name in [
            "0002_c1s1_000451_03.jpg",
            "0002_c2s1_000551_01.jpg",
            "-1_c3s2_000001_00.jpg",
            "0000_c1s6_024001_00.jpg",
        ] {
            let img = image::RgbImage::from_pixel(6, 12, image::Rgb([7, 8, 9]));
            img.save(dir.path().join(name)).unwrap();
        }
        let imgs = load_dataset(dir.path(), DatasetLayout::MarketStyle, (16, 8)).unwrap();
        assert_eq!(imgs.len(), 4);
        assert_eq!(distinct_ids(&imgs), vec!["0002".to_string()]);
        let cams: Vec<u32> = imgs
            .iter()
            .filter(|i| i.id == "0002")
            .map(|i| i.camera)
            .collect();
        assert!(cams.contains(&1) && cams.contains(&2));
    }

    #[test]
    fn mask_attached_and_size_checked() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(6, 10, image::Rgb([5, 5, 5]));
        img.save(dir.path().join("007_cam0.png")).unwrap();
        fs::create_dir(dir.path().join("masks")).unwrap();
        let mask = image::GrayImage::from_fn(6, 10, |x, _| image::Luma([if x < 3 { 255 } else { 0 }]));
        mask.save(dir.path().join("masks/007_cam0.png")).unwrap();
        let imgs = load_dataset(dir.path(), DatasetLayout::PairFolders, (10, 6)).unwrap();
        assert_eq!(imgs.len(), 1);
        let m = imgs[0].mask.as_ref().unwrap();
        assert!(m[0] && !m[5]);

        // wrong-size mask
        let bad = image::GrayImage::from_pixel(3, 3, image::Luma([255]));
        bad.save(dir.path().join("masks/007_cam0.png")).unwrap();
        let err = load_dataset(dir.path(), DatasetLayout::PairFolders, (10, 6)).unwrap_err();
        assert!(matches!(err, Error::MaskSizeMismatch { .. }));
    }

    #[test]
    fn resize_identity_when_sizes_match() {
        let img = flat_image("x", 0, 4, 6, [9, 9, 9]);
        let out = img.resized(6, 4);
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = flat_image("x", 0, 5, 7, [42, 17, 200]);
        let out = img.resized(128, 48);
        assert!(out.pixels.iter().all(|p| *p == [42, 17, 200]));
    }
}

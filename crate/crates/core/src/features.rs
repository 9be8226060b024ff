//! Per-superpixel appearance features.
//!
//! Four channels are extracted for every foreground superpixel: a 20-dim
//! hue/saturation histogram, an 11-dim color-name probability mean, a 9-bin
//! gradient orientation histogram on the gray image, and a two-scale
//! scale-invariant local ternary pattern histogram (2 x 81 codes). All
//! vectors are L1-normalized followed by an elementwise square root, which
//! turns Euclidean comparisons into Hellinger comparisons of the raw
//! histograms.

use std::fs;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::color::{luma, rgb_to_hsv};
use crate::error::{Error, Result};
use crate::imgio::{ColorNameTable, PedestrianImage};
use crate::slic::SuperpixelSegmentation;

pub const SILTP_TAU: f64 = 0.3;
pub const SILTP_RADII: [usize; 2] = [3, 5];

/// Feature channel, in descriptor concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Hsv,
    Cn,
    Hog,
    Siltp,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Hsv, Channel::Cn, Channel::Hog, Channel::Siltp];

    pub fn dim(self) -> usize {
        match self {
            Channel::Hsv => 20,
            Channel::Cn => 11,
            Channel::Hog => 9,
            Channel::Siltp => 162,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Hsv => "hsv",
            Channel::Cn => "cn",
            Channel::Hog => "hog",
            Channel::Siltp => "siltp",
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            Channel::Hsv => 0,
            Channel::Cn => 1,
            Channel::Hog => 2,
            Channel::Siltp => 3,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.tag() == tag)
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown channel: {s}")))
    }
}

/// One appearance vector for one superpixel, tagged with where it came from.
#[derive(Debug, Clone)]
pub struct LocalFeature {
    pub image_id: String,
    pub camera: u32,
    pub strip: u16,
    pub superpixel: u32,
    pub channel: Channel,
    pub vector: Vec<f64>,
}

impl LocalFeature {
    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }
}

/// L1-normalize then take the elementwise square root. The zero vector is
/// returned unchanged; any other nonnegative input comes out with unit L2
/// norm.
pub fn root_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let mut sum = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if x < 0.0 {
            return Err(Error::NegativeElement { index: i, value: x });
        }
        sum += x;
    }
    if sum == 0.0 {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|&x| (x / sum).sqrt()).collect())
}

/// Strip index per superpixel: `min(floor(row * n_strips / H), n_strips - 1)`.
pub fn assign_strips(
    seg: &SuperpixelSegmentation,
    n_strips: usize,
    image_height: usize,
) -> Vec<usize> {
    assert!(n_strips >= 1, "n_strips must be at least 1");
    seg.centroids
        .iter()
        .map(|&(row, _)| {
            (((row * n_strips as f64) / image_height as f64).floor() as usize).min(n_strips - 1)
        })
        .collect()
}

#[inline]
fn hsv_bins(r: u8, g: u8, b: u8) -> (usize, usize) {
    let (h, s, _) = rgb_to_hsv(r, g, b);
    // H in [0,1); S can hit 1.0 exactly and clamps into the top bin
    let hb = ((h * 10.0).floor() as usize).min(9);
    let sb = ((s * 10.0).floor() as usize).min(9);
    (hb, sb)
}

/// 10-bin hue + 10-bin saturation histogram (raw counts).
pub fn extract_hsv(
    image: &PedestrianImage,
    seg: &SuperpixelSegmentation,
    superpixel: u32,
) -> Vec<f64> {
    let mut out = vec![0.0; 20];
    for p in seg.pixels_of(superpixel) {
        let [r, g, b] = image.pixels[p];
        let (hb, sb) = hsv_bins(r, g, b);
        out[hb] += 1.0;
        out[10 + sb] += 1.0;
    }
    out
}

/// Mean 11-dim color-name probability vector over the superpixel.
pub fn extract_cn(
    image: &PedestrianImage,
    seg: &SuperpixelSegmentation,
    superpixel: u32,
    table: &ColorNameTable,
) -> Vec<f64> {
    let mut out = vec![0.0; 11];
    let pixels = seg.pixels_of(superpixel);
    if pixels.is_empty() {
        return out;
    }
    for &p in &pixels {
        let [r, g, b] = image.pixels[p];
        let row = table.lookup(r, g, b);
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    let n = pixels.len() as f64;
    for o in out.iter_mut() {
        *o /= n;
    }
    out
}

/// Gray image (Rec. 601 luma) on the 0..255 scale.
pub fn gray_image(image: &PedestrianImage) -> Vec<f64> {
    image.pixels.iter().map(|&[r, g, b]| luma(r, g, b)).collect()
}

/// (magnitude, bin) of the unsigned gradient orientation at every pixel;
/// central differences with replicated borders, 9 bins of 20 degrees.
fn hog_votes(gray: &[f64], w: usize, h: usize) -> Vec<(f64, usize)> {
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        gray[y * w + x]
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y) - at(x - 1, y)) * 0.5;
            let gy = (at(x, y + 1) - at(x, y - 1)) * 0.5;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                out.push((0.0, 0));
                continue;
            }
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            if deg >= 180.0 {
                deg -= 180.0;
            }
            let bin = ((deg / 20.0).floor() as usize).min(8);
            out.push((mag, bin));
        }
    }
    out
}

/// 9-bin gradient orientation histogram; each pixel votes its magnitude.
pub fn extract_hog(
    image: &PedestrianImage,
    seg: &SuperpixelSegmentation,
    superpixel: u32,
) -> Vec<f64> {
    let gray = gray_image(image);
    let votes = hog_votes(&gray, image.width, image.height);
    let mut out = vec![0.0; 9];
    for p in seg.pixels_of(superpixel) {
        let (mag, bin) = votes[p];
        if mag > 0.0 {
            out[bin] += mag;
        }
    }
    out
}

/// Ternary code in [0, 81) per pixel for one radius. Neighbor order is
/// (up, right, down, left), most significant digit first; borders replicate.
///
/// With tau = 0.3 the band tests `n > (1+tau)c` and `n < (1-tau)c` are
/// evaluated in the rational form `10n > 13c` / `10n < 7c`, which keeps the
/// codes exactly invariant when the whole image is rescaled.
pub(crate) fn siltp_codes(gray: &[f64], w: usize, h: usize, radius: usize, tau: f64) -> Vec<u8> {
    debug_assert!((tau - 0.3).abs() < 1e-12, "rational band hard-wired to tau = 0.3");
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        gray[y * w + x]
    };
    let r = radius as isize;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = at(x, y);
            let hi = 13.0 * c; // 10 * (1 + tau) * c
            let lo = 7.0 * c; // 10 * (1 - tau) * c
            let digit = |n: f64| -> u8 {
                let n10 = 10.0 * n;
                if n10 > hi {
                    2
                } else if n10 < lo {
                    1
                } else {
                    0
                }
            };
            let code = digit(at(x, y - r)) * 27
                + digit(at(x + r, y)) * 9
                + digit(at(x, y + r)) * 3
                + digit(at(x - r, y));
            out.push(code);
        }
    }
    out
}

/// Two-scale SILTP histogram (81 codes at radius 3, then 81 at radius 5)
/// computed from a precomputed gray image. Exposed so callers can check the
/// operator's scale invariance directly on scaled gray data.
pub fn extract_siltp_from_gray(
    gray: &[f64],
    width: usize,
    height: usize,
    seg: &SuperpixelSegmentation,
    superpixel: u32,
) -> Vec<f64> {
    assert_eq!(gray.len(), width * height, "gray buffer size mismatch");
    let mut out = vec![0.0; 162];
    let pixels = seg.pixels_of(superpixel);
    for (si, &radius) in SILTP_RADII.iter().enumerate() {
        let codes = siltp_codes(gray, width, height, radius, SILTP_TAU);
        for &p in &pixels {
            out[si * 81 + codes[p] as usize] += 1.0;
        }
    }
    out
}

/// Two-scale SILTP histogram of a superpixel.
pub fn extract_siltp(
    image: &PedestrianImage,
    seg: &SuperpixelSegmentation,
    superpixel: u32,
) -> Vec<f64> {
    let gray = gray_image(image);
    extract_siltp_from_gray(&gray, image.width, image.height, seg, superpixel)
}

/// Extract all four channels for every foreground superpixel of one image,
/// root-normalized and tagged with strip indices. Zero vectors (e.g. flat
/// regions under HOG) are kept; downstream stages skip them where required.
pub fn extract_features(
    image: &PedestrianImage,
    seg: &SuperpixelSegmentation,
    table: &ColorNameTable,
    n_strips: usize,
) -> Result<Vec<LocalFeature>> {
    let (w, h) = (image.width, image.height);
    let n_sp = seg.n_superpixels();
    let strips = assign_strips(seg, n_strips, h);

    // shared per-pixel precomputation
    let gray = gray_image(image);
    let votes = hog_votes(&gray, w, h);
    let codes3 = siltp_codes(&gray, w, h, SILTP_RADII[0], SILTP_TAU);
    let codes5 = siltp_codes(&gray, w, h, SILTP_RADII[1], SILTP_TAU);

    let mut hsv = vec![vec![0.0f64; 20]; n_sp];
    let mut cn = vec![vec![0.0f64; 11]; n_sp];
    let mut hog = vec![vec![0.0f64; 9]; n_sp];
    let mut siltp = vec![vec![0.0f64; 162]; n_sp];
    let mut counts = vec![0usize; n_sp];

    for (p, &label) in seg.labels.iter().enumerate() {
        let s = label as usize;
        let [r, g, b] = image.pixels[p];
        let (hb, sb) = hsv_bins(r, g, b);
        hsv[s][hb] += 1.0;
        hsv[s][10 + sb] += 1.0;
        let row = table.lookup(r, g, b);
        for (o, &v) in cn[s].iter_mut().zip(row.iter()) {
            *o += v;
        }
        let (mag, bin) = votes[p];
        if mag > 0.0 {
            hog[s][bin] += mag;
        }
        siltp[s][codes3[p] as usize] += 1.0;
        siltp[s][81 + codes5[p] as usize] += 1.0;
        counts[s] += 1;
    }

    let mut out = Vec::new();
    for s in 0..n_sp {
        if !seg.foreground_flags[s] {
            continue;
        }
        for v in cn[s].iter_mut() {
            *v /= counts[s] as f64;
        }
        for (channel, raw) in [
            (Channel::Hsv, &hsv[s]),
            (Channel::Cn, &cn[s]),
            (Channel::Hog, &hog[s]),
            (Channel::Siltp, &siltp[s]),
        ] {
            out.push(LocalFeature {
                image_id: image.id.clone(),
                camera: image.camera,
                strip: strips[s] as u16,
                superpixel: s as u32,
                channel,
                vector: root_normalize(raw)?,
            });
        }
    }
    Ok(out)
}

const FEATURE_MAGIC: &[u8; 8] = b"REIDFEA\0";

#[derive(Serialize, Deserialize)]
struct FeatureIndexRow {
    id: String,
    camera: u32,
    strip: u16,
    superpixel: u32,
}

/// Write a single-channel feature dump: binary vectors plus a JSON-lines
/// sidecar `<path>.idx.jsonl` carrying the tags row by row.
pub fn write_feature_dump(path: &Path, channel: Channel, features: &[LocalFeature]) -> Result<()> {
    let dim = channel.dim();
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    binfmt::write_magic(&mut w, FEATURE_MAGIC, path)?;
    binfmt::write_u32(&mut w, channel.tag(), path)?;
    binfmt::write_u32(&mut w, dim as u32, path)?;
    binfmt::write_u64(&mut w, features.len() as u64, path)?;
    let mut sidecar = String::new();
    for f in features {
        if f.channel != channel {
            return Err(Error::Config(format!(
                "feature dump for {} got a {} vector",
                channel.name(),
                f.channel.name()
            )));
        }
        if f.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.vector.len(),
            });
        }
        let row: Vec<f32> = f.vector.iter().map(|&v| v as f32).collect();
        binfmt::write_f32_slice(&mut w, &row, path)?;
        sidecar.push_str(
            &serde_json::to_string(&FeatureIndexRow {
                id: f.image_id.clone(),
                camera: f.camera,
                strip: f.strip,
                superpixel: f.superpixel,
            })
            .unwrap(),
        );
        sidecar.push('\n');
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let idx_path = sidecar_path(path);
    fs::write(&idx_path, sidecar).map_err(|e| Error::io(&idx_path, e))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".idx.jsonl");
    std::path::PathBuf::from(os)
}

/// Read a feature dump written by [`write_feature_dump`].
pub fn read_feature_dump(path: &Path) -> Result<(Channel, Vec<LocalFeature>)> {
    let mut r = std::io::BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    binfmt::read_magic(&mut r, FEATURE_MAGIC, path)?;
    let tag = binfmt::read_u32(&mut r, path)?;
    let channel = Channel::from_tag(tag).ok_or_else(|| Error::BadFormat {
        path: path.to_path_buf(),
        reason: format!("unknown channel tag {tag}"),
    })?;
    let dim = binfmt::read_u32(&mut r, path)? as usize;
    if dim != channel.dim() {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            reason: format!("channel {} with dim {dim}", channel.name()),
        });
    }
    let count = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 32, "count", path)?;

    let idx_path = sidecar_path(path);
    let idx_file = fs::File::open(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let mut rows = Vec::with_capacity(count);
    for line in std::io::BufReader::new(idx_file).lines() {
        let line = line.map_err(|e| Error::io(&idx_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: FeatureIndexRow = serde_json::from_str(&line).map_err(|e| Error::BadFormat {
            path: idx_path.clone(),
            reason: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.len() != count {
        return Err(Error::BadFormat {
            path: idx_path,
            reason: format!("sidecar has {} rows, dump has {count}", rows.len()),
        });
    }

    let mut out = Vec::with_capacity(count);
    for row in rows {
        let vec32 = binfmt::read_f32_vec(&mut r, dim, path)?;
        out.push(LocalFeature {
            image_id: row.id,
            camera: row.camera,
            strip: row.strip,
            superpixel: row.superpixel,
            channel,
            vector: vec32.into_iter().map(|v| v as f64).collect(),
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            reason: "trailing bytes after declared vectors".into(),
        });
    }
    Ok((channel, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slic;
    use proptest::prelude::*;

    fn image_from_fn(
        w: usize,
        h: usize,
        f: impl Fn(usize, usize) -> [u8; 3],
    ) -> PedestrianImage {
        let pixels = (0..w * h).map(|p| f(p % w, p / w)).collect();
        PedestrianImage::new("img", 0, w, h, pixels, None).unwrap()
    }

    fn whole_image_segmentation(img: &PedestrianImage) -> SuperpixelSegmentation {
        slic::segment(img, 1, 20.0).unwrap()
    }

    #[test]
    fn hsv_pure_red_superpixel() {
        let img = image_from_fn(10, 5, |_, _| [255, 0, 0]);
        let seg = whole_image_segmentation(&img);
        let v = extract_hsv(&img, &seg, 0);
        assert_eq!(v[0], 50.0); // H = 0 -> bin 0
        assert_eq!(v[10 + 9], 50.0); // S = 1 clamps into top bin
        assert_eq!(v.iter().sum::<f64>(), 100.0);
    }

    #[test]
    fn hsv_gray_superpixel() {
        let img = image_from_fn(4, 4, |_, _| [77, 77, 77]);
        let seg = whole_image_segmentation(&img);
        let v = extract_hsv(&img, &seg, 0);
        assert_eq!(v[0], 16.0); // achromatic hue convention 0
        assert_eq!(v[10], 16.0); // S = 0 -> bin 0
    }

    #[test]
    fn hsv_half_red_half_cyan_matches_pixel_oracle() {
        let img = image_from_fn(10, 10, |_, y| if y < 5 { [255, 0, 0] } else { [0, 255, 255] });
        let seg = whole_image_segmentation(&img);
        let v = extract_hsv(&img, &seg, 0);

        // oracle: per-pixel conversion and manual binning
        let mut want = vec![0.0; 20];
        for p in 0..100 {
            let [r, g, b] = img.pixels[p];
            let (h, s, _) = rgb_to_hsv(r, g, b);
            want[((h * 10.0).floor() as usize).min(9)] += 1.0;
            want[10 + ((s * 10.0).floor() as usize).min(9)] += 1.0;
        }
        assert_eq!(v, want);
        assert_eq!(v[0], 50.0); // red: H = 0
        assert_eq!(v[5], 50.0); // cyan: H = 0.5
    }

    #[test]
    fn cn_mean_of_identical_rows_is_the_row() {
        let table = ColorNameTable::one_hot_checker();
        let img = image_from_fn(6, 6, |_, _| [0, 0, 0]); // bin (0,0,0) -> term 0
        let seg = whole_image_segmentation(&img);
        let v = extract_cn(&img, &seg, 0, &table);
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cn_mixed_superpixel_gives_bin_frequencies() {
        let table = ColorNameTable::one_hot_checker();
        // half pixels in bin (0,0,0) -> term 0, half in bin (1,0,0) -> term 1
        let img = image_from_fn(10, 2, |x, _| if x < 5 { [0, 0, 0] } else { [8, 0, 0] });
        let seg = whole_image_segmentation(&img);
        let v = extract_cn(&img, &seg, 0, &table);
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);

        // oracle: explicit pixel loop
        let mut want = [0.0; 11];
        for p in 0..20 {
            let [r, g, b] = img.pixels[p];
            for (o, &t) in want.iter_mut().zip(table.lookup(r, g, b).iter()) {
                *o += t / 20.0;
            }
        }
        for (a, b) in v.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hog_constant_region_is_all_zero() {
        let img = image_from_fn(8, 8, |_, _| [50, 50, 50]);
        let seg = whole_image_segmentation(&img);
        let v = extract_hog(&img, &seg, 0);
        assert!(v.iter().all(|&x| x == 0.0));
        // stays all-zero through normalization
        let n = root_normalize(&v).unwrap();
        assert!(n.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hog_vertical_edge_votes_bin_zero() {
        let img = image_from_fn(10, 6, |x, _| if x < 5 { [0, 0, 0] } else { [200, 200, 200] });
        let seg = whole_image_segmentation(&img);
        let v = extract_hog(&img, &seg, 0);
        assert!(v[0] > 0.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hog_diagonal_ramp_votes_bin_two() {
        // I = 5 * (x + y): interior gradient (5, 5), orientation 45 degrees
        // -> bin floor(45 / 20) = 2. Border pixels see replicated values and
        // a skewed orientation, so the probe superpixel stays interior.
        let img = image_from_fn(10, 10, |x, y| {
            let v = (5 * (x + y)) as u8;
            [v, v, v]
        });
        let mut labels = vec![0u32; 100];
        let mut interior = 0usize;
        for y in 1..9 {
            for x in 1..9 {
                labels[y * 10 + x] = 1;
                interior += 1;
            }
        }
        let seg = SuperpixelSegmentation {
            width: 10,
            height: 10,
            labels,
            centroids: vec![(0.0, 0.0), (4.5, 4.5)],
            sizes: vec![100 - interior, interior],
            foreground_flags: vec![true, true],
        };
        let v = extract_hog(&img, &seg, 1);
        assert!(v[2] > 0.0);
        for (i, &x) in v.iter().enumerate() {
            if i != 2 {
                assert_eq!(x, 0.0, "unexpected mass in bin {i}");
            }
        }

        // oracle: explicit gradient loop over the interior
        let gray = gray_image(&img);
        let mut mass = 0.0;
        for y in 1..9isize {
            for x in 1..9isize {
                let gx = (gray[y as usize * 10 + (x + 1) as usize]
                    - gray[y as usize * 10 + (x - 1) as usize])
                    * 0.5;
                let gy = (gray[(y + 1) as usize * 10 + x as usize]
                    - gray[(y - 1) as usize * 10 + x as usize])
                    * 0.5;
                mass += (gx * gx + gy * gy).sqrt();
            }
        }
        assert!((v[2] - mass).abs() < 1e-9);
    }

    #[test]
    fn siltp_constant_region_codes_zero() {
        let img = image_from_fn(12, 9, |_, _| [100, 100, 100]);
        let seg = whole_image_segmentation(&img);
        let v = extract_siltp(&img, &seg, 0);
        assert_eq!(v[0], 108.0); // all mass at code 0, radius 3
        assert_eq!(v[81], 108.0); // and radius 5
        assert_eq!(v.iter().sum::<f64>(), 216.0);
    }

    #[test]
    fn siltp_digit_example() {
        // center 100, up 140 (> 130 -> 2), right 100 (0), down 60 (< 70 -> 1),
        // left 100 (0): code 2*27 + 0*9 + 1*3 + 0 = 57
        let img = image_from_fn(7, 7, |x, y| {
            let v = match (x, y) {
                (3, 0) => 140u8,
                (3, 6) => 60,
                _ => 100,
            };
            [v, v, v]
        });
        // single-pixel superpixel at the center
        let mut labels = vec![0u32; 49];
        labels[3 * 7 + 3] = 1;
        let seg = SuperpixelSegmentation {
            width: 7,
            height: 7,
            labels,
            centroids: vec![(3.0, 3.0), (3.0, 3.0)],
            sizes: vec![48, 1],
            foreground_flags: vec![true, true],
        };
        let v = extract_siltp(&img, &seg, 1);
        assert_eq!(v[57], 1.0, "radius-3 code must be 57");
        assert_eq!(v[..81].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn siltp_scale_invariance_is_exact() {
        let img = image_from_fn(16, 20, |x, y| {
            let v = ((x * 13 + y * 7) % 251) as u8;
            [v, v, v]
        });
        let seg = slic::segment(&img, 6, 20.0).unwrap();
        // integer-valued gray map, including ratios right on the tau band
        let gray: Vec<f64> = (0..16 * 20)
            .map(|p| ((p * 13 + p / 16 * 7) % 251) as f64)
            .collect();
        for s in [0.5f64, 1.0, 2.0, 10.0] {
            let scaled: Vec<f64> = gray.iter().map(|&g| g * s).collect();
            for sp in 0..seg.n_superpixels() as u32 {
                let a = extract_siltp_from_gray(&gray, 16, 20, &seg, sp);
                let b = extract_siltp_from_gray(&scaled, 16, 20, &seg, sp);
                assert!(
                    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "scale {s} changed the histogram"
                );
            }
        }
    }

    #[test]
    fn root_normalize_examples() {
        assert_eq!(root_normalize(&[4.0]).unwrap(), vec![1.0]);
        let v = root_normalize(&[2.0, 2.0]).unwrap();
        assert!((v[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!((v[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert_eq!(root_normalize(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            root_normalize(&[1.0, -0.5]),
            Err(Error::NegativeElement { index: 1, .. })
        ));
    }

    #[test]
    fn assign_strips_examples() {
        let img = image_from_fn(10, 100, |_, _| [9, 9, 9]);
        let seg = whole_image_segmentation(&img);
        assert_eq!(assign_strips(&seg, 1, 100), vec![0]);

        // floor arithmetic on synthetic centroids
        let fake = SuperpixelSegmentation {
            width: 10,
            height: 100,
            labels: vec![0; 1000],
            centroids: vec![(10.0, 5.0), (99.0, 5.0)],
            sizes: vec![500, 500],
            foreground_flags: vec![true, true],
        };
        assert_eq!(assign_strips(&fake, 4, 100), vec![0, 3]);
    }

    #[test]
    fn strip_populations_even_on_uniform_image() {
        let img = image_from_fn(48, 128, |_, _| [120, 60, 60]);
        let seg = slic::segment(&img, 32, 20.0).unwrap();
        let strips = assign_strips(&seg, 3, 128);
        let mut pop = vec![0usize; 3];
        for &s in &strips {
            pop[s] += 1;
        }
        let max = *pop.iter().max().unwrap() as isize;
        let min = *pop.iter().min().unwrap() as isize;
        assert!(max - min <= 2, "strip populations {pop:?} uneven");
    }

    #[test]
    fn extract_features_matches_single_extractors() {
        let table = ColorNameTable::synthetic();
        let img = image_from_fn(20, 30, |x, y| {
            [(x * 12) as u8, (y * 8) as u8, ((x + y) * 5) as u8]
        });
        let seg = slic::segment(&img, 8, 20.0).unwrap();
        let feats = extract_features(&img, &seg, &table, 4).unwrap();
        assert_eq!(feats.len(), seg.n_superpixels() * 4);
        for f in &feats {
            assert_eq!(f.vector.len(), f.channel.dim());
            let raw = match f.channel {
                Channel::Hsv => extract_hsv(&img, &seg, f.superpixel),
                Channel::Cn => extract_cn(&img, &seg, f.superpixel, &table),
                Channel::Hog => extract_hog(&img, &seg, f.superpixel),
                Channel::Siltp => extract_siltp(&img, &seg, f.superpixel),
            };
            let want = root_normalize(&raw).unwrap();
            for (a, b) in f.vector.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn foreground_only_features() {
        let table = ColorNameTable::synthetic();
        let img = image_from_fn(10, 10, |_, _| [10, 200, 30]);
        let seg = slic::segment(&img, 4, 20.0).unwrap();
        let mut mask = vec![false; 100];
        for (i, m) in mask.iter_mut().enumerate() {
            *m = i % 10 < 5; // left half foreground
        }
        let seg = slic::mark_foreground(&seg, Some(&mask), 0.5).unwrap();
        let feats = extract_features(&img, &seg, &table, 2).unwrap();
        let n_fg = seg.foreground_flags.iter().filter(|&&f| f).count();
        assert!(n_fg < seg.n_superpixels());
        assert_eq!(feats.len(), n_fg * 4);
    }

    #[test]
    fn feature_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hsv.feat");
        let feats = vec![
            LocalFeature {
                image_id: "0001".into(),
                camera: 0,
                strip: 3,
                superpixel: 17,
                channel: Channel::Hsv,
                vector: (0..20).map(|i| i as f64 / 20.0).collect(),
            },
            LocalFeature {
                image_id: "0002".into(),
                camera: 1,
                strip: 0,
                superpixel: 2,
                channel: Channel::Hsv,
                vector: vec![0.25; 20],
            },
        ];
        write_feature_dump(&path, Channel::Hsv, &feats).unwrap();
        let (channel, back) = read_feature_dump(&path).unwrap();
        assert_eq!(channel, Channel::Hsv);
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].image_id, "0001");
        assert_eq!(back[0].strip, 3);
        assert_eq!(back[1].camera, 1);
        for (a, b) in back[0].vector.iter().zip(feats[0].vector.iter()) {
            assert!((a - b).abs() < 1e-6); // f32 storage
        }
    }

    proptest! {
        #[test]
        fn root_normalize_unit_norm(v in proptest::collection::vec(0.0f64..100.0, 1..40)) {
            prop_assume!(v.iter().sum::<f64>() > 1e-9);
            let n = root_normalize(&v).unwrap();
            let norm: f64 = n.iter().map(|x| x * x).sum::<f64>();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }

        #[test]
        fn hellinger_identity(
            u in proptest::collection::vec(0.0f64..10.0, 8),
            v in proptest::collection::vec(0.0f64..10.0, 8),
        ) {
            prop_assume!(u.iter().sum::<f64>() > 1e-6 && v.iter().sum::<f64>() > 1e-6);
            let ru = root_normalize(&u).unwrap();
            let rv = root_normalize(&v).unwrap();
            let d2: f64 = ru.iter().zip(rv.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let su: f64 = u.iter().sum();
            let sv: f64 = v.iter().sum();
            let bc: f64 = u
                .iter()
                .zip(v.iter())
                .map(|(a, b)| ((a / su) * (b / sv)).sqrt())
                .sum();
            prop_assert!((d2 - 2.0 * (1.0 - bc)).abs() < 1e-10);
        }
    }
}

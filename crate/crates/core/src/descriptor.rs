//! Per-strip TF histograms and the fused image descriptor.
//!
//! Every foreground superpixel's features are encoded into the channel
//! codebook with multiple assignment; counts are accumulated per strip,
//! strips are concatenated per channel, each channel block is L2-normalized
//! (so no channel dominates the fusion by raw count scale), and the blocks
//! are concatenated in the fixed channel order HSV | CN | HOG | SILTP.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::features::{extract_features, Channel, LocalFeature};
use crate::imgio::{ColorNameTable, PedestrianImage};
use crate::slic::SuperpixelSegmentation;

/// TF counts of visual words for one (strip, channel) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StripHistogram {
    pub strip: usize,
    pub channel: Channel,
    pub counts: Vec<f64>,
}

/// The fused descriptor of one image.
#[derive(Debug, Clone)]
pub struct ImageDescriptor {
    pub image_id: String,
    pub camera: u32,
    /// Concatenated channel blocks, each block strip-major.
    pub full: Vec<f64>,
    /// (channel, block length) in concatenation order.
    pub blocks: Vec<(Channel, usize)>,
}

impl ImageDescriptor {
    pub fn dim(&self) -> usize {
        self.full.len()
    }

    /// Slice of one channel's block.
    pub fn block(&self, channel: Channel) -> Option<&[f64]> {
        let mut off = 0;
        for &(c, len) in &self.blocks {
            if c == channel {
                return Some(&self.full[off..off + len]);
            }
            off += len;
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct DescriptorConfig {
    pub n_strips: usize,
    pub ma: usize,
    pub channels: Vec<Channel>,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            n_strips: 16,
            ma: 10,
            channels: Channel::ALL.to_vec(),
        }
    }
}

/// Histogram the visual-word assignments of `features_in_strip`. All
/// features must match the codebook's channel; callers exclude zero vectors
/// before encoding.
pub fn strip_histogram(
    codebook: &Codebook,
    features_in_strip: &[&LocalFeature],
    ma: usize,
    strip: usize,
) -> Result<StripHistogram> {
    let mut counts = vec![0.0; codebook.k()];
    for f in features_in_strip {
        if f.channel != codebook.channel() {
            return Err(Error::Config(format!(
                "strip histogram: feature channel {} does not match codebook channel {}",
                f.channel.name(),
                codebook.channel().name()
            )));
        }
        for (w, weight) in codebook.encode_ma(&f.vector, ma)? {
            counts[w] += weight;
        }
    }
    Ok(StripHistogram {
        strip,
        channel: codebook.channel(),
        counts,
    })
}

fn l2_normalize(block: &mut [f64]) {
    let norm: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in block.iter_mut() {
            *v /= norm;
        }
    }
}

/// Build the fused descriptor of one image from already-extracted local
/// features. Zero vectors are skipped at encoding time.
pub fn build_descriptor_from_features(
    image_id: &str,
    camera: u32,
    features: &[LocalFeature],
    codebooks: &BTreeMap<Channel, Codebook>,
    config: &DescriptorConfig,
) -> Result<ImageDescriptor> {
    let mut full = Vec::new();
    let mut blocks = Vec::new();
    for &channel in &config.channels {
        let codebook = codebooks.get(&channel).ok_or_else(|| {
            Error::Config(format!("missing codebook for channel {}", channel.name()))
        })?;
        let mut block = Vec::with_capacity(config.n_strips * codebook.k());
        for strip in 0..config.n_strips {
            let in_strip: Vec<&LocalFeature> = features
                .iter()
                .filter(|f| {
                    f.channel == channel && f.strip as usize == strip && !f.is_zero()
                })
                .collect();
            let hist = strip_histogram(codebook, &in_strip, config.ma, strip)?;
            block.extend_from_slice(&hist.counts);
        }
        l2_normalize(&mut block);
        blocks.push((channel, block.len()));
        full.extend_from_slice(&block);
    }
    Ok(ImageDescriptor {
        image_id: image_id.to_string(),
        camera,
        full,
        blocks,
    })
}

/// Segment-extract-encode one image end to end.
pub fn build_descriptor(
    image: &PedestrianImage,
    seg: &SuperpixelSegmentation,
    codebooks: &BTreeMap<Channel, Codebook>,
    table: &ColorNameTable,
    config: &DescriptorConfig,
) -> Result<ImageDescriptor> {
    let features = extract_features(image, seg, table, config.n_strips)?;
    build_descriptor_from_features(&image.id, image.camera, &features, codebooks, config)
}

const DESCRIPTOR_MAGIC: &[u8; 8] = b"REIDDSC\0";

#[derive(Serialize, Deserialize)]
struct DescriptorIndexRow {
    id: String,
    camera: u32,
}

/// Write a descriptor matrix: binary f32 rows plus a `<path>.idx.jsonl`
/// sidecar with per-image id and camera.
pub fn write_descriptor_matrix(path: &Path, descriptors: &[ImageDescriptor]) -> Result<()> {
    let dim = descriptors.first().map(|d| d.dim()).unwrap_or(0);
    for d in descriptors {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: d.dim(),
            });
        }
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    binfmt::write_magic(&mut w, DESCRIPTOR_MAGIC, path)?;
    binfmt::write_u64(&mut w, descriptors.len() as u64, path)?;
    binfmt::write_u64(&mut w, dim as u64, path)?;
    let mut sidecar = String::new();
    for d in descriptors {
        let row: Vec<f32> = d.full.iter().map(|&v| v as f32).collect();
        binfmt::write_f32_slice(&mut w, &row, path)?;
        sidecar.push_str(
            &serde_json::to_string(&DescriptorIndexRow {
                id: d.image_id.clone(),
                camera: d.camera,
            })
            .unwrap(),
        );
        sidecar.push('\n');
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let idx = sidecar_path(path);
    fs::write(&idx, sidecar).map_err(|e| Error::io(&idx, e))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".idx.jsonl");
    std::path::PathBuf::from(os)
}

/// Read a descriptor matrix written by [`write_descriptor_matrix`]. Block
/// structure is not stored; descriptors come back as flat vectors.
pub fn read_descriptor_matrix(path: &Path) -> Result<Vec<ImageDescriptor>> {
    let mut r = std::io::BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    binfmt::read_magic(&mut r, DESCRIPTOR_MAGIC, path)?;
    let n = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 32, "count", path)?;
    let dim = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 28, "dim", path)?;

    let idx = sidecar_path(path);
    let idx_file = fs::File::open(&idx).map_err(|e| Error::io(&idx, e))?;
    let mut rows = Vec::with_capacity(n);
    for line in std::io::BufReader::new(idx_file).lines() {
        let line = line.map_err(|e| Error::io(&idx, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DescriptorIndexRow = serde_json::from_str(&line).map_err(|e| Error::BadFormat {
            path: idx.clone(),
            reason: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.len() != n {
        return Err(Error::BadFormat {
            path: idx,
            reason: format!("sidecar rows {} != declared {n}", rows.len()),
        });
    }
    let mut out = Vec::with_capacity(n);
    for row in rows {
        let data = binfmt::read_f32_vec(&mut r, dim, path)?;
        let full: Vec<f64> = data.into_iter().map(|v| v as f64).collect();
        out.push(ImageDescriptor {
            image_id: row.id,
            camera: row.camera,
            blocks: Vec::new(),
            full,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            reason: "trailing bytes after declared rows".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::MetricModel;
    use crate::slic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature(channel: Channel, strip: u16, vector: Vec<f64>) -> LocalFeature {
        LocalFeature {
            image_id: "img".into(),
            camera: 0,
            strip,
            superpixel: 0,
            channel,
            vector,
        }
    }

    fn line_codebook(channel: Channel, positions: &[f64]) -> Codebook {
        let words: Vec<Vec<f64>> = positions.iter().map(|&p| vec![p]).collect();
        Codebook::new(channel, words, MetricModel::identity(1)).unwrap()
    }

    #[test]
    fn empty_strip_gives_zero_counts() {
        let cb = line_codebook(Channel::Hsv, &[0.0, 1.0, 2.0]);
        let hist = strip_histogram(&cb, &[], 2, 0).unwrap();
        assert_eq!(hist.counts, vec![0.0; 3]);
    }

    #[test]
    fn single_feature_hits_nearest_word() {
        let cb = line_codebook(Channel::Hsv, &[0.0, 1.0, 2.0, 3.1]);
        let f = feature(Channel::Hsv, 0, vec![3.0]);
        let hist = strip_histogram(&cb, &[&f], 1, 0).unwrap();
        assert_eq!(hist.counts, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn five_features_ma2_sum_is_ten_and_matches_brute_force() {
        let positions = [0.0, 0.7, 1.9, 3.2, 5.0, 8.0];
        let cb = line_codebook(Channel::Cn, &positions);
        let values = [0.1, 1.0, 2.0, 4.0, 7.0];
        let feats: Vec<LocalFeature> = values
            .iter()
            .map(|&v| feature(Channel::Cn, 0, vec![v]))
            .collect();
        let refs: Vec<&LocalFeature> = feats.iter().collect();
        let hist = strip_histogram(&cb, &refs, 2, 0).unwrap();
        assert_eq!(hist.counts.iter().sum::<f64>(), 10.0);

        // oracle: independent nearest-neighbor search
        let mut want = vec![0.0; positions.len()];
        for &v in &values {
            let mut order: Vec<usize> = (0..positions.len()).collect();
            order.sort_by(|&a, &b| {
                (positions[a] - v)
                    .abs()
                    .partial_cmp(&(positions[b] - v).abs())
                    .unwrap()
                    .then(a.cmp(&b))
            });
            want[order[0]] += 1.0;
            want[order[1]] += 1.0;
        }
        assert_eq!(hist.counts, want);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let cb = line_codebook(Channel::Hog, &[0.0, 1.0]);
        let f = feature(Channel::Hsv, 0, vec![0.5]);
        assert!(strip_histogram(&cb, &[&f], 1, 0).is_err());
    }

    #[test]
    fn no_foreground_gives_zero_descriptor() {
        let cb = line_codebook(Channel::Hsv, &[0.0, 1.0]);
        let mut books = BTreeMap::new();
        books.insert(Channel::Hsv, cb);
        let config = DescriptorConfig {
            n_strips: 4,
            ma: 1,
            channels: vec![Channel::Hsv],
        };
        let d =
            build_descriptor_from_features("img", 0, &[], &books, &config).unwrap();
        assert_eq!(d.dim(), 8);
        assert!(d.full.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_single_strip_normalization() {
        // 3 superpixels all nearest word 0 -> counts (3, 0) -> normalized (1, 0)
        let cb = line_codebook(Channel::Hsv, &[0.0, 10.0]);
        let mut books = BTreeMap::new();
        books.insert(Channel::Hsv, cb);
        let feats: Vec<LocalFeature> = (0..3)
            .map(|_| feature(Channel::Hsv, 0, vec![0.2]))
            .collect();
        let config = DescriptorConfig {
            n_strips: 1,
            ma: 1,
            channels: vec![Channel::Hsv],
        };
        let d = build_descriptor_from_features("img", 0, &feats, &books, &config).unwrap();
        assert_eq!(d.full, vec![1.0, 0.0]);
    }

    #[test]
    fn missing_codebook_rejected() {
        let config = DescriptorConfig {
            n_strips: 1,
            ma: 1,
            channels: vec![Channel::Hsv, Channel::Cn],
        };
        let mut books = BTreeMap::new();
        books.insert(Channel::Hsv, line_codebook(Channel::Hsv, &[0.0, 1.0]));
        let err =
            build_descriptor_from_features("img", 0, &[], &books, &config).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_vectors_are_skipped_at_encode_time() {
        let cb = line_codebook(Channel::Hog, &[0.0, 1.0]);
        let mut books = BTreeMap::new();
        books.insert(Channel::Hog, cb);
        let feats = vec![
            feature(Channel::Hog, 0, vec![0.0]), // zero vector: skipped
            feature(Channel::Hog, 0, vec![0.9]),
        ];
        let config = DescriptorConfig {
            n_strips: 1,
            ma: 1,
            channels: vec![Channel::Hog],
        };
        let d = build_descriptor_from_features("img", 0, &feats, &books, &config).unwrap();
        // only the nonzero feature encoded, hitting word 1
        assert_eq!(d.full, vec![0.0, 1.0]);
    }

    #[test]
    fn permuting_feature_order_leaves_descriptor_unchanged() {
        let cb = line_codebook(Channel::Cn, &[0.0, 1.0, 2.5, 4.0]);
        let mut books = BTreeMap::new();
        books.insert(Channel::Cn, cb);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<LocalFeature> = (0..40)
            .map(|i| feature(Channel::Cn, (i % 4) as u16, vec![rng.random::<f64>() * 4.0]))
            .collect();
        let config = DescriptorConfig {
            n_strips: 4,
            ma: 2,
            channels: vec![Channel::Cn],
        };
        let a = build_descriptor_from_features("img", 0, &feats, &books, &config).unwrap();
        let mut shuffled = feats.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let b = build_descriptor_from_features("img", 0, &shuffled, &books, &config).unwrap();
        assert_eq!(a.full, b.full);
    }

    #[test]
    fn full_four_channel_descriptor_length_and_norms() {
        use crate::codebook::fit_kmeans;
        use crate::features::extract_features;

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pixels: Vec<[u8; 3]> = (0..128 * 48)
            .map(|_| [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()])
            .collect();
        let img = PedestrianImage::new("0001", 0, 48, 128, pixels, None).unwrap();
        let seg = slic::segment(&img, 500, 20.0).unwrap();
        let table = ColorNameTable::synthetic();
        let n_strips = 16;
        let feats = extract_features(&img, &seg, &table, n_strips).unwrap();

        let mut books = BTreeMap::new();
        for channel in Channel::ALL {
            let vectors: Vec<Vec<f64>> = feats
                .iter()
                .filter(|f| f.channel == channel && !f.is_zero())
                .map(|f| f.vector.clone())
                .collect();
            let metric = MetricModel::identity(channel.dim());
            // short fit: this test checks descriptor shape, not clustering
            let cb = fit_kmeans(&vectors, channel, 350, &metric, 2, 1e-2, 0).unwrap();
            books.insert(channel, cb);
        }
        let config = DescriptorConfig {
            n_strips,
            ma: 10,
            channels: Channel::ALL.to_vec(),
        };
        let d = build_descriptor_from_features("0001", 0, &feats, &books, &config).unwrap();
        assert_eq!(d.dim(), 4 * 16 * 350); // 22400
        for channel in Channel::ALL {
            let block = d.block(channel).unwrap();
            let norm: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                norm == 0.0 || (norm - 1.0).abs() < 1e-9,
                "{} block norm {norm}",
                channel.name()
            );
        }
    }

    #[test]
    fn descriptor_matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("descr.bin");
        let descriptors = vec![
            ImageDescriptor {
                image_id: "0001".into(),
                camera: 0,
                full: vec![0.25, 0.5, 0.75],
                blocks: vec![(Channel::Hsv, 3)],
            },
            ImageDescriptor {
                image_id: "0002".into(),
                camera: 1,
                full: vec![1.0, 0.0, 0.0],
                blocks: vec![(Channel::Hsv, 3)],
            },
        ];
        write_descriptor_matrix(&path, &descriptors).unwrap();
        let back = read_descriptor_matrix(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].image_id, "0001");
        assert_eq!(back[1].camera, 1);
        assert_eq!(back[0].full, vec![0.25, 0.5, 0.75]);
    }
}

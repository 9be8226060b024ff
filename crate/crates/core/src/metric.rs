//! KISSME Mahalanobis metric learning on strip-constrained feature pairs.
//!
//! Positive pairs are cross-camera features of the same identity in the same
//! horizontal strip; negative pairs cross identities within a strip. The
//! metric is the difference of the inverted pair-difference covariances,
//! projected onto the PSD cone so it induces a true pseudometric. The same
//! machinery serves both levels of the pipeline: local superpixel features
//! (codebook generation) and whole-image descriptors (part-two scoring with
//! strip index 0).
//!
//! The difference covariances here are mean-normalized (divided by pair
//! counts) rather than raw sums, so the metric does not depend on the
//! arbitrary positive/negative count imbalance.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::binfmt;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{canonical_symmetric_eigen, check_symmetric, symmetrize};

/// Borrowed view of one tagged feature, shared by local features and image
/// descriptors.
#[derive(Debug, Clone, Copy)]
pub struct FeatureRef<'a> {
    pub id: &'a str,
    pub camera: u32,
    pub strip: u16,
    pub vector: &'a [f64],
}

impl<'a> FeatureRef<'a> {
    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }
}

impl<'a> From<&'a crate::features::LocalFeature> for FeatureRef<'a> {
    fn from(f: &'a crate::features::LocalFeature) -> Self {
        FeatureRef {
            id: &f.image_id,
            camera: f.camera,
            strip: f.strip,
            vector: &f.vector,
        }
    }
}

/// Index pairs into a feature store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub positives: Vec<(u32, u32)>,
    pub negatives: Vec<(u32, u32)>,
    pub strip_constrained: bool,
}

/// Mean-normalized difference covariances for the two pair sets.
#[derive(Debug, Clone)]
pub struct ScatterPair {
    pub delta_p: DMatrix<f64>,
    pub delta_n: DMatrix<f64>,
    pub count_p: usize,
    pub count_n: usize,
}

/// A learned PSD metric with its whitening factor `L` (`L^T L = m`), so
/// `d(x, y) = |L x - L y|`.
#[derive(Debug, Clone)]
pub struct MetricModel {
    m: DMatrix<f64>,
    whitener: DMatrix<f64>,
    eigen_floor: f64,
    epsilon: f64,
}

const NEGATIVE_SAMPLE_CAP: usize = 10_000_000;

/// Build strip-constrained pair sets. Positives are every cross-camera
/// same-identity pair within a strip; negatives are a seeded uniform sample
/// (with replacement) of cross-identity pairs within a strip, sized
/// `n_negative_ratio * |P|`. Zero vectors never enter either set.
pub fn build_pairs(
    features: &[FeatureRef<'_>],
    n_negative_ratio: f64,
    seed: u64,
) -> Result<PairSet> {
    build_pairs_capped(features, n_negative_ratio, seed, None)
}

/// [`build_pairs`] with an optional cap on the number of positive pairs.
/// When the exhaustive positive set exceeds `max_positives`, a seeded
/// uniform subsample is kept; negatives are sized off the kept count.
pub fn build_pairs_capped(
    features: &[FeatureRef<'_>],
    n_negative_ratio: f64,
    seed: u64,
    max_positives: Option<usize>,
) -> Result<PairSet> {
    if n_negative_ratio < 0.0 {
        return Err(Error::Config("negative ratio must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_strip: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, f) in features.iter().enumerate() {
        if !f.is_zero() {
            by_strip.entry(f.strip).or_default().push(i);
        }
    }

    let mut positives: Vec<(u32, u32)> = Vec::new();
    // per-strip count of cross-identity (unordered) candidate pairs
    let mut neg_candidates: Vec<(u16, u64)> = Vec::new();
    for (&strip, members) in &by_strip {
        let mut id_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for &i in members {
            *id_counts.entry(features[i].id).or_insert(0) += 1;
        }
        let n = members.len() as u64;
        let total = n * n.saturating_sub(1) / 2;
        let same: u64 = id_counts.values().map(|&c| c * (c - 1) / 2).sum();
        if total > same {
            neg_candidates.push((strip, total - same));
        }
        for (a, &i) in members.iter().enumerate() {
            for &j in members.iter().skip(a + 1) {
                let (fi, fj) = (&features[i], &features[j]);
                if fi.id == fj.id && fi.camera != fj.camera {
                    positives.push((i as u32, j as u32));
                }
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    if let Some(cap) = max_positives {
        if positives.len() > cap {
            positives.shuffle(&mut rng);
            positives.truncate(cap);
            positives.sort_unstable();
        }
    }

    let n_negatives = (n_negative_ratio * positives.len() as f64).round() as usize;
    let mut negatives = Vec::with_capacity(n_negatives);
    if n_negatives > 0 {
        if neg_candidates.is_empty() {
            return Err(Error::NoNegativePairs);
        }
        let weights: Vec<f64> = neg_candidates.iter().map(|&(_, c)| c as f64).collect();
        let strip_picker = WeightedIndex::new(&weights)
            .map_err(|e| Error::Config(format!("negative sampling weights: {e}")))?;
        let mut attempts = 0usize;
        while negatives.len() < n_negatives {
            attempts += 1;
            if attempts > NEGATIVE_SAMPLE_CAP {
                return Err(Error::NoNegativePairs);
            }
            let (strip, _) = neg_candidates[strip_picker.sample(&mut rng)];
            let members = &by_strip[&strip];
            let i = members[rng.random_range(0..members.len())];
            let j = members[rng.random_range(0..members.len())];
            if i == j || features[i].id == features[j].id {
                continue;
            }
            negatives.push((i.min(j) as u32, i.max(j) as u32));
        }
    }

    Ok(PairSet {
        positives,
        negatives,
        strip_constrained: true,
    })
}

fn mean_outer_products(
    features: &[FeatureRef<'_>],
    pairs: &[(u32, u32)],
    dim: usize,
) -> DMatrix<f64> {
    let sum = exec::chunk_fold(
        pairs,
        2048,
        || DMatrix::<f64>::zeros(dim, dim),
        |mut acc, chunk| {
            let mut diff = vec![0.0f64; dim];
            for &(i, j) in chunk {
                let a = features[i as usize].vector;
                let b = features[j as usize].vector;
                for k in 0..dim {
                    diff[k] = a[k] - b[k];
                }
                for r in 0..dim {
                    let dr = diff[r];
                    for c in r..dim {
                        acc[(r, c)] += dr * diff[c];
                    }
                }
            }
            acc
        },
        |a, b| a + b,
    );
    let mut out = sum / pairs.len() as f64;
    // mirror the accumulated upper triangle; exact symmetry by construction
    for r in 0..dim {
        for c in 0..r {
            out[(r, c)] = out[(c, r)];
        }
    }
    out
}

/// Mean difference-outer-product matrices over the two pair sets.
pub fn accumulate_scatter(features: &[FeatureRef<'_>], pairs: &PairSet) -> Result<ScatterPair> {
    if pairs.positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    if pairs.negatives.is_empty() {
        return Err(Error::NoNegativePairs);
    }
    let dim = features
        .first()
        .map(|f| f.vector.len())
        .ok_or(Error::NoPositivePairs)?;
    for f in features {
        if f.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.vector.len(),
            });
        }
    }
    Ok(ScatterPair {
        delta_p: mean_outer_products(features, &pairs.positives, dim),
        delta_n: mean_outer_products(features, &pairs.negatives, dim),
        count_p: pairs.positives.len(),
        count_n: pairs.negatives.len(),
    })
}

fn regularized_inverse(m: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let ridge = epsilon * m.trace() / d as f64;
    let reg = m + DMatrix::identity(d, d) * ridge;
    reg.clone().cholesky().map(|c| c.inverse()).ok_or(Error::InversionFailure {
        regularized: epsilon > 0.0,
    })
}

/// The raw (possibly indefinite) metric `delta_p^-1 - delta_n^-1` after
/// trace-scaled ridge regularization, before PSD projection. Exposed so the
/// pre-projection matrix can be checked against independent inversions.
pub fn kissme_raw(scatter: &ScatterPair, regularization: f64) -> Result<DMatrix<f64>> {
    if regularization < 0.0 {
        return Err(Error::Config("regularization must be nonnegative".into()));
    }
    check_symmetric(&scatter.delta_p, 1e-9)?;
    check_symmetric(&scatter.delta_n, 1e-9)?;
    let inv_p = regularized_inverse(&scatter.delta_p, regularization)?;
    let inv_n = regularized_inverse(&scatter.delta_n, regularization)?;
    Ok(symmetrize(&(inv_p - inv_n)))
}

/// Fit the metric: invert the regularized difference covariances, subtract,
/// and project the result onto the PSD cone.
pub fn kissme_fit(scatter: &ScatterPair, regularization: f64) -> Result<MetricModel> {
    let raw = kissme_raw(scatter, regularization)?;
    let mut model = psd_project(&raw)?;
    model.epsilon = regularization;
    Ok(model)
}

/// Clamp negative eigenvalues to zero and rebuild; the whitener is
/// `Lambda^(1/2) U^T` from the clamped decomposition.
pub fn psd_project(m: &DMatrix<f64>) -> Result<MetricModel> {
    check_symmetric(m, 1e-8)?;
    let sym = symmetrize(m);
    let (values, vectors) = canonical_symmetric_eigen(&sym)?;
    let d = sym.nrows();
    let clamped: DVector<f64> = values.map(|v| v.max(0.0));
    let projected = symmetrize(&(&vectors * DMatrix::from_diagonal(&clamped) * vectors.transpose()));
    let sqrt = DMatrix::from_diagonal(&clamped.map(|v| v.sqrt()));
    let whitener = sqrt * vectors.transpose();
    let _ = d;
    Ok(MetricModel {
        m: projected,
        whitener,
        eigen_floor: 0.0,
        epsilon: 0.0,
    })
}

impl MetricModel {
    /// The Euclidean metric: `m = L = I`.
    pub fn identity(dim: usize) -> Self {
        MetricModel {
            m: DMatrix::identity(dim, dim),
            whitener: DMatrix::identity(dim, dim),
            eigen_floor: 0.0,
            epsilon: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }

    pub fn eigen_floor(&self) -> f64 {
        self.eigen_floor
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// `sqrt((x - y)^T m (x - y))`, computed as `|L(x - y)|` so it can never
    /// go negative under roundoff.
    pub fn mahalanobis_distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        self.check_dim(y.len())?;
        let d = self.dim();
        let mut sq = 0.0;
        for r in 0..d {
            let row = self.whitener.row(r);
            let mut acc = 0.0;
            for k in 0..d {
                acc += row[k] * (x[k] - y[k]);
            }
            sq += acc * acc;
        }
        Ok(sq.sqrt())
    }

    /// Map `x` to the whitened space where the metric is Euclidean.
    pub fn whiten(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let v = DVector::from_column_slice(x);
        Ok((&self.whitener * v).data.into())
    }

    /// Whiten a batch of row vectors.
    pub fn whiten_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for r in rows {
            self.check_dim(r.len())?;
        }
        Ok(exec::map_indexed(rows.len(), |i| {
            let v = DVector::from_column_slice(&rows[i]);
            (&self.whitener * v).data.into()
        }))
    }

    const MAGIC: &'static [u8; 8] = b"REIDMET\0";

    /// Serialize: magic, d, row-major m, row-major L, epsilon, eigen floor,
    /// metadata blob.
    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w, path, metadata)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W, path: &Path, metadata: &str) -> Result<()> {
        binfmt::write_magic(w, Self::MAGIC, path)?;
        let d = self.dim();
        binfmt::write_u64(w, d as u64, path)?;
        binfmt::write_f64_slice(w, self.m.transpose().as_slice(), path)?;
        binfmt::write_f64_slice(w, self.whitener.transpose().as_slice(), path)?;
        binfmt::write_f64(w, self.epsilon, path)?;
        binfmt::write_f64(w, self.eigen_floor, path)?;
        let meta = metadata.as_bytes();
        binfmt::write_u64(w, meta.len() as u64, path)?;
        w.write_all(meta).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut r = std::io::BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
        let out = Self::read_from(&mut r, path)?;
        Ok(out)
    }

    pub(crate) fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<(Self, String)> {
        binfmt::read_magic(r, Self::MAGIC, path)?;
        let d = binfmt::check_len(binfmt::read_u64(r, path)?, 1 << 20, "dimension", path)?;
        let m_data = binfmt::read_f64_vec(r, d * d, path)?;
        let l_data = binfmt::read_f64_vec(r, d * d, path)?;
        let epsilon = binfmt::read_f64(r, path)?;
        let eigen_floor = binfmt::read_f64(r, path)?;
        let meta_len = binfmt::check_len(binfmt::read_u64(r, path)?, 1 << 24, "metadata", path)?;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|e| Error::io(path, e))?;
        let metadata = String::from_utf8(meta).map_err(|e| Error::BadFormat {
            path: path.to_path_buf(),
            reason: format!("metadata not UTF-8: {e}"),
        })?;
        Ok((
            MetricModel {
                m: DMatrix::from_row_slice(d, d, &m_data),
                whitener: DMatrix::from_row_slice(d, d, &l_data),
                eigen_floor,
                epsilon,
            },
            metadata,
        ))
    }
}

//! Gallery ranking, CMC and mAP computation, and the trial-based
//! experimental protocol runner that wires the whole pipeline together:
//! local metric learning, codebook fitting, descriptor construction,
//! part-two scoring and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codebook::{fit_kmeans, Codebook};
use crate::descriptor::{build_descriptor_from_features, DescriptorConfig, ImageDescriptor};
use crate::error::{Error, Result};
use crate::exec;
use crate::features::{extract_features, Channel, LocalFeature};
use crate::imgio::{ColorNameTable, PedestrianImage, SplitPlan, DISTRACTOR_ID, JUNK_ID};
use crate::linalg::{canonical_symmetric_eigen, symmetrize};
use crate::metric::{
    accumulate_scatter, build_pairs_capped, kissme_fit, FeatureRef, MetricModel,
};
use crate::slic;
use crate::subspace::{nfst_fit, xqda_fit, LabeledVec, ProjectionModel};

/// One gallery or probe entry.
#[derive(Debug, Clone, Copy)]
pub struct Item<'a> {
    pub id: &'a str,
    pub camera: u32,
    pub vector: &'a [f64],
}

/// Ranking of one query against a junk-filtered gallery.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    pub query_camera: u32,
    /// Kept gallery indices sorted by ascending score (ties by index).
    pub order: Vec<usize>,
    /// Whether each entry of `order` is a true match.
    pub matched: Vec<bool>,
    /// Scores along `order`, non-decreasing.
    pub scores: Vec<f64>,
}

/// Junk rules applied to the gallery before ranking.
#[derive(Debug, Clone)]
pub struct JunkFilter {
    /// Remove gallery items with the query's identity seen by the query's
    /// camera (the standard fixed-gallery protocol rule).
    pub remove_same_camera_same_id: bool,
    /// Identities removed from every gallery (e.g. the junk label).
    pub junk_ids: Vec<String>,
}

impl Default for JunkFilter {
    fn default() -> Self {
        Self {
            remove_same_camera_same_id: true,
            junk_ids: vec![JUNK_ID.to_string()],
        }
    }
}

/// Distance scorer over image descriptors; lower means more similar.
pub enum DescriptorScorer {
    Euclidean,
    /// Optional PCA followed by a KISSME metric on (projected) descriptors.
    Kissme {
        mean: Vec<f64>,
        pca: Option<DMatrix<f64>>,
        metric: MetricModel,
    },
    Projection(ProjectionModel),
}

impl DescriptorScorer {
    const MAGIC: &'static [u8; 8] = b"REIDSCR\0";

    /// Serialize: magic, kind tag, then the kind's payload.
    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        use std::io::Write;
        let mut w =
            std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        crate::binfmt::write_magic(&mut w, Self::MAGIC, path)?;
        match self {
            DescriptorScorer::Euclidean => {
                crate::binfmt::write_u32(&mut w, 0, path)?;
                let meta = metadata.as_bytes();
                crate::binfmt::write_u64(&mut w, meta.len() as u64, path)?;
                w.write_all(meta).map_err(|e| Error::io(path, e))?;
            }
            DescriptorScorer::Kissme { mean, pca, metric } => {
                crate::binfmt::write_u32(&mut w, 1, path)?;
                crate::binfmt::write_u64(&mut w, mean.len() as u64, path)?;
                crate::binfmt::write_f64_slice(&mut w, mean, path)?;
                match pca {
                    Some(basis) => {
                        crate::binfmt::write_u32(&mut w, 1, path)?;
                        crate::binfmt::write_u64(&mut w, basis.nrows() as u64, path)?;
                        crate::binfmt::write_u64(&mut w, basis.ncols() as u64, path)?;
                        crate::binfmt::write_f64_slice(
                            &mut w,
                            basis.transpose().as_slice(),
                            path,
                        )?;
                    }
                    None => crate::binfmt::write_u32(&mut w, 0, path)?,
                }
                metric.write_to(&mut w, path, metadata)?;
            }
            DescriptorScorer::Projection(model) => {
                crate::binfmt::write_u32(&mut w, 2, path)?;
                model.write_to(&mut w, path, metadata)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        use std::io::Read;
        let mut r =
            std::io::BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
        crate::binfmt::read_magic(&mut r, Self::MAGIC, path)?;
        match crate::binfmt::read_u32(&mut r, path)? {
            0 => {
                let len = crate::binfmt::check_len(
                    crate::binfmt::read_u64(&mut r, path)?,
                    1 << 24,
                    "meta",
                    path,
                )?;
                let mut buf = vec![0u8; len];
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                Ok((
                    DescriptorScorer::Euclidean,
                    String::from_utf8_lossy(&buf).into_owned(),
                ))
            }
            1 => {
                let d = crate::binfmt::check_len(
                    crate::binfmt::read_u64(&mut r, path)?,
                    1 << 28,
                    "dim",
                    path,
                )?;
                let mean = crate::binfmt::read_f64_vec(&mut r, d, path)?;
                let pca = if crate::binfmt::read_u32(&mut r, path)? == 1 {
                    let rows = crate::binfmt::check_len(
                        crate::binfmt::read_u64(&mut r, path)?,
                        1 << 28,
                        "rows",
                        path,
                    )?;
                    let cols = crate::binfmt::check_len(
                        crate::binfmt::read_u64(&mut r, path)?,
                        1 << 20,
                        "cols",
                        path,
                    )?;
                    let data = crate::binfmt::read_f64_vec(&mut r, rows * cols, path)?;
                    Some(DMatrix::from_row_slice(rows, cols, &data))
                } else {
                    None
                };
                let (metric, meta) = MetricModel::read_from(&mut r, path)?;
                Ok((DescriptorScorer::Kissme { mean, pca, metric }, meta))
            }
            2 => {
                let (model, meta) = ProjectionModel::read_from(&mut r, path)?;
                Ok((DescriptorScorer::Projection(model), meta))
            }
            other => Err(Error::BadFormat {
                path: path.to_path_buf(),
                reason: format!("unknown scorer kind {other}"),
            }),
        }
    }

    pub fn score(&self, query: &[f64], gallery: &[f64]) -> Result<f64> {
        match self {
            DescriptorScorer::Euclidean => {
                if query.len() != gallery.len() {
                    return Err(Error::DimensionMismatch {
                        expected: query.len(),
                        got: gallery.len(),
                    });
                }
                Ok(query
                    .iter()
                    .zip(gallery.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt())
            }
            DescriptorScorer::Kissme { mean, pca, metric } => {
                let reduce = |x: &[f64]| -> Result<Vec<f64>> {
                    if x.len() != mean.len() {
                        return Err(Error::DimensionMismatch {
                            expected: mean.len(),
                            got: x.len(),
                        });
                    }
                    let centered: Vec<f64> =
                        x.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
                    Ok(match pca {
                        Some(basis) => {
                            let v = DVector::from_vec(centered);
                            (basis.transpose() * v).data.into()
                        }
                        None => centered,
                    })
                };
                metric.mahalanobis_distance(&reduce(query)?, &reduce(gallery)?)
            }
            DescriptorScorer::Projection(model) => model.score(query, gallery),
        }
    }
}

/// Rank `gallery` for one `query`: junk is removed first, the rest sorted by
/// ascending score with ties broken by gallery index.
pub fn rank_gallery(
    scorer: &DescriptorScorer,
    query: Item<'_>,
    gallery: &[Item<'_>],
    junk: &JunkFilter,
) -> Result<RankedList> {
    let mut kept: Vec<usize> = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        if junk.junk_ids.iter().any(|j| j == g.id) {
            continue;
        }
        if junk.remove_same_camera_same_id && g.id == query.id && g.camera == query.camera {
            continue;
        }
        kept.push(i);
    }
    if kept.is_empty() {
        return Err(Error::EmptyGallery(query.id.to_string()));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(kept.len());
    for i in kept {
        scored.push((i, scorer.score(query.vector, gallery[i].vector)?));
    }
    scored.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let order: Vec<usize> = scored.iter().map(|&(i, _)| i).collect();
    let scores: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
    let matched: Vec<bool> = order
        .iter()
        .map(|&i| gallery[i].id == query.id && query.id != DISTRACTOR_ID)
        .collect();
    Ok(RankedList {
        query_id: query.id.to_string(),
        query_camera: query.camera,
        order,
        matched,
        scores,
    })
}

/// CMC curve: `cmc[k-1]` is the fraction of queries whose first true match
/// appears at rank `<= k`.
pub fn cmc(ranked: &[RankedList], max_rank: usize) -> Result<Vec<f64>> {
    if ranked.is_empty() {
        return Err(Error::Config("cmc needs at least one ranked list".into()));
    }
    let mut curve = vec![0.0f64; max_rank];
    for list in ranked {
        let first = list
            .matched
            .iter()
            .position(|&m| m)
            .ok_or_else(|| Error::NoPossibleMatch(list.query_id.clone()))?;
        for v in curve.iter_mut().skip(first) {
            *v += 1.0;
        }
    }
    for v in curve.iter_mut() {
        *v /= ranked.len() as f64;
    }
    Ok(curve)
}

/// Mean average precision: AP per query is the mean of precision at each
/// true-match position; mAP averages over queries.
pub fn mean_ap(ranked: &[RankedList]) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::Config("mean_ap needs at least one ranked list".into()));
    }
    let mut total = 0.0f64;
    for list in ranked {
        let mut hits = 0usize;
        let mut ap = 0.0f64;
        for (pos, &m) in list.matched.iter().enumerate() {
            if m {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        if hits == 0 {
            return Err(Error::NoPossibleMatch(list.query_id.clone()));
        }
        total += ap / hits as f64;
    }
    Ok(total / ranked.len() as f64)
}

/// Part-two learner selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartTwo {
    Euclidean,
    Kissme { pca_dim: Option<usize> },
    Xqda { target_dim: Option<usize> },
    Nfst,
}

/// How probes and galleries are formed from the test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// Every test image probes the test images of the other cameras.
    CrossCamera,
    /// Every test image probes the full test gallery; the junk filter
    /// removes same-camera same-id entries.
    FullGallery,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n_superpixels: usize,
    pub compactness: f64,
    pub foreground_threshold: f64,
    pub n_strips: usize,
    pub codebook_k: usize,
    pub ma: usize,
    pub kissme_epsilon: f64,
    pub negative_ratio: f64,
    pub max_positive_pairs: Option<usize>,
    /// Cluster codebooks under the learned metric (the method under study)
    /// or under the identity metric (the unsupervised baseline).
    pub metric_codebook: bool,
    pub part_two: PartTwo,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
    pub max_rank: usize,
    pub ranking: RankingMode,
    pub multi_query: bool,
    pub channels: Vec<Channel>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_superpixels: 500,
            compactness: 20.0,
            foreground_threshold: 0.5,
            n_strips: 16,
            codebook_k: 350,
            ma: 10,
            kissme_epsilon: 1e-3,
            negative_ratio: 1.0,
            max_positive_pairs: Some(200_000),
            metric_codebook: true,
            part_two: PartTwo::Euclidean,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-4,
            seed: 0,
            max_rank: 30,
            ranking: RankingMode::CrossCamera,
            multi_query: false,
            channels: Channel::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub max_rank: usize,
    /// Mean CMC over trials.
    pub cmc: Vec<f64>,
    /// Mean mAP over trials.
    pub map: f64,
    pub per_trial: Vec<TrialReport>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).copied().unwrap_or(f64::NAN)
    }
}

/// Per-image extraction output cached across trials.
pub struct ExtractedImage {
    pub id: String,
    pub camera: u32,
    pub features: Vec<LocalFeature>,
}

/// Segment every image, apply its mask, and extract root-normalized local
/// features. Split-independent, so protocols run it once for all trials.
pub fn extract_all(
    images: &[PedestrianImage],
    table: &ColorNameTable,
    config: &ProtocolConfig,
) -> Result<Vec<ExtractedImage>> {
    let results = exec::map_indexed(images.len(), |i| -> Result<ExtractedImage> {
        let img = &images[i];
        let seg = slic::segment(img, config.n_superpixels, config.compactness)?;
        let seg = slic::mark_foreground(&seg, img.mask.as_deref(), config.foreground_threshold)?;
        let features = extract_features(img, &seg, table, config.n_strips)?;
        Ok(ExtractedImage {
            id: img.id.clone(),
            camera: img.camera,
            features,
        })
    });
    results.into_iter().collect()
}

/// Learn the per-channel metric (or take the identity) and fit each
/// channel's codebook on the training identities.
pub fn train_codebooks(
    extracted: &[ExtractedImage],
    train_ids: &[String],
    config: &ProtocolConfig,
    trial_seed: u64,
) -> Result<BTreeMap<Channel, Codebook>> {
    let mut books = BTreeMap::new();
    for &channel in &config.channels {
        let mut train_feats: Vec<&LocalFeature> = Vec::new();
        for img in extracted {
            if train_ids.binary_search(&img.id).is_ok() {
                train_feats.extend(
                    img.features
                        .iter()
                        .filter(|f| f.channel == channel && !f.is_zero()),
                );
            }
        }
        let refs: Vec<FeatureRef> = train_feats.iter().map(|&f| f.into()).collect();
        let metric = if config.metric_codebook {
            let pairs = build_pairs_capped(
                &refs,
                config.negative_ratio,
                trial_seed ^ channel.tag() as u64,
                config.max_positive_pairs,
            )?;
            let scatter = accumulate_scatter(&refs, &pairs)?;
            kissme_fit(&scatter, config.kissme_epsilon)?
        } else {
            MetricModel::identity(channel.dim())
        };
        let vectors: Vec<Vec<f64>> = train_feats.iter().map(|f| f.vector.clone()).collect();
        let book = fit_kmeans(
            &vectors,
            channel,
            config.codebook_k,
            &metric,
            config.kmeans_max_iters,
            config.kmeans_tol,
            trial_seed ^ ((channel.tag() as u64) << 8),
        )?;
        books.insert(channel, book);
    }
    Ok(books)
}

/// Encode every extracted image into its fused descriptor.
pub fn build_all_descriptors(
    extracted: &[ExtractedImage],
    books: &BTreeMap<Channel, Codebook>,
    config: &ProtocolConfig,
) -> Result<Vec<ImageDescriptor>> {
    let dconfig = DescriptorConfig {
        n_strips: config.n_strips,
        ma: config.ma,
        channels: config.channels.clone(),
    };
    let out = exec::map_indexed(extracted.len(), |i| {
        let img = &extracted[i];
        build_descriptor_from_features(&img.id, img.camera, &img.features, books, &dconfig)
    });
    out.into_iter().collect()
}

/// PCA basis (d x p) of the given rows around their mean, using the Gram
/// trick when rows are fewer than dimensions.
fn pca_basis(rows: &[&[f64]], p: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Config("PCA needs at least 2 rows".into()));
    }
    let d = rows[0].len();
    let p = p.min(n - 1).min(d).max(1);
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let basis = if n <= d {
        let gram = symmetrize(&(&centered * centered.transpose()));
        let (vals, vecs) = canonical_symmetric_eigen(&gram)?;
        let mut b = DMatrix::<f64>::zeros(d, p);
        for i in 0..p {
            let v = vals[i].max(f64::MIN_POSITIVE);
            let q = centered.transpose() * (vecs.column(i) / v.sqrt());
            b.set_column(i, &q);
        }
        b
    } else {
        let cov = symmetrize(&(centered.transpose() * &centered));
        let (_, vecs) = canonical_symmetric_eigen(&cov)?;
        vecs.columns(0, p).into_owned()
    };
    Ok((mean, basis))
}

/// Fit the configured part-two scorer on training descriptors.
pub fn train_part_two(
    train: &[&ImageDescriptor],
    config: &ProtocolConfig,
    trial_seed: u64,
) -> Result<DescriptorScorer> {
    match &config.part_two {
        PartTwo::Euclidean => Ok(DescriptorScorer::Euclidean),
        PartTwo::Kissme { pca_dim } => {
            let (mean, pca) = match pca_dim {
                Some(p) => {
                    let rows: Vec<&[f64]> = train.iter().map(|d| d.full.as_slice()).collect();
                    let (mean, basis) = pca_basis(&rows, *p)?;
                    (mean, Some(basis))
                }
                None => (vec![0.0; train.first().map(|d| d.dim()).unwrap_or(0)], None),
            };
            let reduced: Vec<Vec<f64>> = train
                .iter()
                .map(|d| {
                    let centered: Vec<f64> = d
                        .full
                        .iter()
                        .zip(mean.iter())
                        .map(|(a, b)| a - b)
                        .collect();
                    match &pca {
                        Some(basis) => {
                            let v = DVector::from_vec(centered);
                            (basis.transpose() * v).data.into()
                        }
                        None => centered,
                    }
                })
                .collect();
            let refs: Vec<FeatureRef> = train
                .iter()
                .zip(reduced.iter())
                .map(|(d, v)| FeatureRef {
                    id: &d.image_id,
                    camera: d.camera,
                    strip: 0,
                    vector: v,
                })
                .collect();
            let pairs = build_pairs_capped(
                &refs,
                config.negative_ratio.max(1.0),
                trial_seed ^ 0xD15C,
                config.max_positive_pairs,
            )?;
            let scatter = accumulate_scatter(&refs, &pairs)?;
            let metric = kissme_fit(&scatter, config.kissme_epsilon.max(1e-6))?;
            Ok(DescriptorScorer::Kissme { mean, pca, metric })
        }
        PartTwo::Xqda { target_dim } => {
            let cameras: Vec<u32> = {
                let mut c: Vec<u32> = train.iter().map(|d| d.camera).collect();
                c.sort();
                c.dedup();
                c
            };
            if cameras.len() < 2 {
                return Err(Error::Config("XQDA needs two cameras".into()));
            }
            // first camera group vs everything else
            let cam_a: Vec<LabeledVec> = train
                .iter()
                .filter(|d| d.camera == cameras[0])
                .map(|d| LabeledVec {
                    id: &d.image_id,
                    vector: &d.full,
                })
                .collect();
            let cam_b: Vec<LabeledVec> = train
                .iter()
                .filter(|d| d.camera != cameras[0])
                .map(|d| LabeledVec {
                    id: &d.image_id,
                    vector: &d.full,
                })
                .collect();
            let model = xqda_fit(&cam_a, &cam_b, *target_dim, config.kissme_epsilon.max(1e-6))?;
            Ok(DescriptorScorer::Projection(model))
        }
        PartTwo::Nfst => {
            let rows: Vec<LabeledVec> = train
                .iter()
                .map(|d| LabeledVec {
                    id: &d.image_id,
                    vector: &d.full,
                })
                .collect();
            let model = nfst_fit(&rows)?;
            Ok(DescriptorScorer::Projection(model))
        }
    }
}

/// Element-wise mean pooling of one identity's per-camera query descriptors.
pub fn pool_multi_query(descriptors: &[&ImageDescriptor]) -> Result<Vec<f64>> {
    let dim = descriptors
        .first()
        .map(|d| d.dim())
        .ok_or_else(|| Error::Config("cannot pool an empty query group".into()))?;
    let mut out = vec![0.0f64; dim];
    for d in descriptors {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: d.dim(),
            });
        }
        for (o, &v) in out.iter_mut().zip(d.full.iter()) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= descriptors.len() as f64;
    }
    Ok(out)
}

/// Rank every test probe against its gallery under the protocol's ranking
/// mode, pooling multi-query probes when configured.
pub fn rank_test_set(
    scorer: &DescriptorScorer,
    test: &[&ImageDescriptor],
    config: &ProtocolConfig,
) -> Result<Vec<RankedList>> {
    let junk = JunkFilter::default();

    // probe set: (id, camera, vector); pooled in multi-query mode
    let mut probes: Vec<(String, u32, Vec<f64>)> = Vec::new();
    if config.multi_query {
        let mut groups: BTreeMap<(String, u32), Vec<&ImageDescriptor>> = BTreeMap::new();
        for d in test {
            if d.image_id == DISTRACTOR_ID || d.image_id == JUNK_ID {
                continue;
            }
            groups
                .entry((d.image_id.clone(), d.camera))
                .or_default()
                .push(d);
        }
        for ((id, camera), group) in groups {
            probes.push((id, camera, pool_multi_query(&group)?));
        }
    } else {
        for d in test {
            if d.image_id == DISTRACTOR_ID || d.image_id == JUNK_ID {
                continue;
            }
            probes.push((d.image_id.clone(), d.camera, d.full.clone()));
        }
    }

    let ranked = exec::map_indexed(probes.len(), |pi| -> Result<RankedList> {
        let (id, camera, vector) = &probes[pi];
        let gallery: Vec<Item> = test
            .iter()
            .filter(|g| match config.ranking {
                RankingMode::CrossCamera => g.camera != *camera,
                RankingMode::FullGallery => true,
            })
            .map(|g| Item {
                id: &g.image_id,
                camera: g.camera,
                vector: &g.full,
            })
            .collect();
        rank_gallery(
            scorer,
            Item {
                id,
                camera: *camera,
                vector,
            },
            &gallery,
            &junk,
        )
    });
    ranked.into_iter().collect()
}

/// Run the full pipeline over every split: train the per-channel metric and
/// codebook on training identities, build descriptors, fit the part-two
/// scorer, rank test probes and aggregate CMC/mAP over trials.
pub fn run_protocol(
    images: &[PedestrianImage],
    table: &ColorNameTable,
    splits: &[SplitPlan],
    config: &ProtocolConfig,
) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::Config("no splits supplied".into()));
    }
    let extracted = extract_all(images, table, config)?;
    run_protocol_extracted(&extracted, splits, config)
}

/// [`run_protocol`] on pre-extracted features, for callers that sweep
/// configurations over the same dataset.
pub fn run_protocol_extracted(
    extracted: &[ExtractedImage],
    splits: &[SplitPlan],
    config: &ProtocolConfig,
) -> Result<EvalReport> {
    let mut per_trial = Vec::with_capacity(splits.len());
    for plan in splits {
        // leakage guard
        for id in &plan.train_ids {
            if plan.test_ids.binary_search(id).is_ok() {
                return Err(Error::Leakage(id.clone()));
            }
        }
        let trial_seed = config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(plan.trial_seed);

        let books = train_codebooks(extracted, &plan.train_ids, config, trial_seed)?;
        let descriptors = build_all_descriptors(extracted, &books, config)?;

        let train: Vec<&ImageDescriptor> = descriptors
            .iter()
            .filter(|d| plan.train_ids.binary_search(&d.image_id).is_ok())
            .collect();
        let test: Vec<&ImageDescriptor> = descriptors
            .iter()
            .filter(|d| {
                plan.test_ids.binary_search(&d.image_id).is_ok()
                    || d.image_id == DISTRACTOR_ID
                    || d.image_id == JUNK_ID
            })
            .collect();
        if train.is_empty() || test.is_empty() {
            return Err(Error::BadSplit("a trial has an empty side".into()));
        }

        let scorer = train_part_two(&train, config, trial_seed)?;
        let ranked = rank_test_set(&scorer, &test, config)?;
        let curve = cmc(&ranked, config.max_rank)?;
        let map = mean_ap(&ranked)?;
        per_trial.push(TrialReport {
            cmc: curve,
            map,
            n_queries: ranked.len(),
        });
    }

    let n = per_trial.len() as f64;
    let mut mean_cmc = vec![0.0f64; config.max_rank];
    let mut map = 0.0f64;
    for t in &per_trial {
        for (m, &v) in mean_cmc.iter_mut().zip(t.cmc.iter()) {
            *m += v / n;
        }
        map += t.map / n;
    }
    Ok(EvalReport {
        protocol: format!("{:?}", config.ranking),
        max_rank: config.max_rank,
        cmc: mean_cmc,
        map,
        per_trial,
    })
}

/// Write `rank,accuracy` CSV rows for one curve.
pub fn write_cmc_csv(path: &Path, cmc: &[f64]) -> Result<()> {
    let mut text = String::from("rank,accuracy\n");
    for (i, v) in cmc.iter().enumerate() {
        text.push_str(&format!("{},{v:.6}\n", i + 1));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse a CSV written by [`write_cmc_csv`].
pub fn read_cmc_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue; // header
        }
        let mut cols = line.split(',');
        let _rank = cols.next();
        let acc: f64 = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::BadFormat {
                path: path.to_path_buf(),
                reason: format!("line {}: bad row", i + 1),
            })?;
        out.push(acc);
    }
    Ok(out)
}

/// JSON summary with the ranks most protocols report.
pub fn write_report_json(path: &Path, report: &EvalReport, config_hash: &str) -> Result<()> {
    let summary = serde_json::json!({
        "config_hash": config_hash,
        "protocol": report.protocol,
        "rank_1": report.rank(1),
        "rank_5": report.rank(5),
        "rank_10": report.rank(10),
        "rank_20": report.rank(20),
        "rank_30": report.rank(30),
        "map": report.map,
        "n_trials": report.per_trial.len(),
        "per_trial": report.per_trial,
        "cmc": report.cmc,
    });
    fs::write(path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| Error::io(path, e))
}

/// Plot one or more CMC curves as an SVG polyline chart.
pub fn write_cmc_svg(path: &Path, curves: &[(String, Vec<f64>)]) -> Result<()> {
    if curves.is_empty() || curves.iter().any(|(_, c)| c.is_empty()) {
        return Err(Error::Config("nothing to plot".into()));
    }
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0;
    const MB: f64 = 50.0;
    const MT: f64 = 20.0;
    const MR: f64 = 20.0;
    let max_rank = curves.iter().map(|(_, c)| c.len()).max().unwrap();
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let x_of = |rank: f64| ML + (rank - 1.0) / (max_rank.max(2) as f64 - 1.0) * (W - ML - MR);
    let y_of = |acc: f64| H - MB - acc * (H - MB - MT);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for t in 0..=10 {
        let acc = t as f64 / 10.0;
        let y = y_of(acc);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{acc:.1}</text>\n",
            ML - 6.0,
            y + 3.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n",
            W - MR
        ));
    }
    let rank_step = (max_rank / 10).max(1);
    for rank in (1..=max_rank).step_by(rank_step) {
        let x = x_of(rank as f64);
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{rank}</text>\n",
            H - MB + 14.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">rank</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">matching rate</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    ));
    for (ci, (label, curve)) in curves.iter().enumerate() {
        let color = palette[ci % palette.len()];
        let points: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(i, &acc)| format!("{:.2},{:.2}", x_of((i + 1) as f64), y_of(acc)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
            ML + 10.0,
            MT + 16.0 + 14.0 * ci as f64
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

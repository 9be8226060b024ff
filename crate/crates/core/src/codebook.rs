//! Visual-word codebooks clustered under a learned Mahalanobis metric.
//!
//! Instead of running k-means in raw Euclidean space, features are first
//! mapped through the metric's whitener `L` (so squared Euclidean distance
//! in the mapped space equals the Mahalanobis quadratic form), clustered
//! there with k-means++ initialized Lloyd iterations, and the final words
//! are reported as original-space means of each cluster's members. Encoding
//! assigns a feature to its `ma` nearest words under the same metric with
//! unit TF weights.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::binfmt;
use crate::error::{Error, Result};
use crate::exec;
use crate::features::Channel;
use crate::metric::MetricModel;

/// Cluster centers for one feature channel, stored in original feature
/// space together with the metric they were clustered under.
#[derive(Debug, Clone)]
pub struct Codebook {
    channel: Channel,
    words: Vec<Vec<f64>>,
    metric: MetricModel,
    whitened_words: Vec<Vec<f64>>,
}

/// Diagnostics from a k-means run.
#[derive(Debug, Clone)]
pub struct KmeansReport {
    /// Final whitened-space inertia (sum of squared distances to centers).
    pub inertia: f64,
    /// Inertia after each assignment pass, in order.
    pub inertia_trace: Vec<f64>,
    /// Final cluster index per input point.
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Nearest center by squared distance, ties to the lower index.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = f64::INFINITY;
    let mut bi = 0usize;
    for (ci, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best {
            best = d;
            bi = ci;
        }
    }
    (bi, best)
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let picker = WeightedIndex::new(&dist).expect("nonnegative weights");
            picker.sample(rng)
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        let c = centers.last().unwrap();
        for (d, p) in dist.iter_mut().zip(points.iter()) {
            let nd = sq_dist(p, c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centers
}

fn assign_all(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let pairs = exec::map_indexed(points.len(), |i| nearest(&points[i], centers));
    let mut assignments = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len());
    for (a, d) in pairs {
        assignments.push(a);
        dists.push(d);
    }
    (assignments, dists)
}

/// Per-cluster (sum, count) accumulated in fixed chunk order so the result
/// is bitwise deterministic regardless of thread count.
fn cluster_sums(
    points: &[Vec<f64>],
    assignments: &[usize],
    k: usize,
    dim: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let indices: Vec<usize> = (0..points.len()).collect();
    exec::chunk_fold(
        &indices,
        4096,
        || (vec![vec![0.0f64; dim]; k], vec![0usize; k]),
        |(mut sums, mut counts), chunk| {
            for &i in chunk {
                let c = assignments[i];
                counts[c] += 1;
                let s = &mut sums[c];
                for (sv, pv) in s.iter_mut().zip(points[i].iter()) {
                    *sv += pv;
                }
            }
            (sums, counts)
        },
        |(mut sa, mut ca), (sb, cb)| {
            for (a, b) in sa.iter_mut().zip(sb.iter()) {
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x += y;
                }
            }
            for (a, b) in ca.iter_mut().zip(cb.iter()) {
                *a += b;
            }
            (sa, ca)
        },
    )
}

/// Fit a codebook under `metric`. Lloyd iterations run in whitened space
/// with k-means++ seeding; iteration stops when the relative inertia change
/// drops below `tol`, assignments stop moving, or `max_iters` is reached.
/// Empty clusters are reseeded to the point currently farthest from its
/// center. Deterministic given the seed.
pub fn fit_kmeans(
    features: &[Vec<f64>],
    channel: Channel,
    k: usize,
    metric: &MetricModel,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<Codebook> {
    fit_kmeans_report(features, channel, k, metric, max_iters, tol, seed).map(|(cb, _)| cb)
}

/// [`fit_kmeans`] plus diagnostics used by tests and benchmarks.
pub fn fit_kmeans_report(
    features: &[Vec<f64>],
    channel: Channel,
    k: usize,
    metric: &MetricModel,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(Codebook, KmeansReport)> {
    let n = features.len();
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    for f in features {
        if f.len() != metric.dim() {
            return Err(Error::DimensionMismatch {
                expected: metric.dim(),
                got: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("k-means input features"));
        }
    }

    let points = metric.whiten_all(features)?;
    let dim = metric.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(&points, k, &mut rng);

    let mut assignments: Vec<usize> = Vec::new();
    let mut inertia = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0usize;

    for iter in 0..max_iters.max(1) {
        iterations = iter + 1;
        let (new_assignments, dists) = assign_all(&points, &centers);
        let new_inertia: f64 = dists.iter().sum();
        trace.push(new_inertia);

        let unchanged = !assignments.is_empty() && new_assignments == assignments;
        let small_change = inertia.is_finite()
            && (inertia - new_inertia).abs() <= tol * inertia.max(f64::MIN_POSITIVE);
        assignments = new_assignments;
        inertia = new_inertia;
        if unchanged || small_change {
            break;
        }

        let (sums, counts) = cluster_sums(&points, &assignments, k, dim);
        let mut empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for (c, (sum, count)) in centers.iter_mut().zip(sums.iter().zip(counts.iter())) {
            if *count > 0 {
                *c = sum.iter().map(|&s| s / *count as f64).collect();
            }
        }
        if !empties.is_empty() {
            // reseed each empty cluster to the point farthest from its
            // current center, one point per cluster, ties to lower index
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                dists[b]
                    .partial_cmp(&dists[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut cursor = order.into_iter();
            while let Some(c) = empties.pop() {
                if let Some(p) = cursor.next() {
                    centers[c] = points[p].clone();
                }
            }
        }
    }

    // guarantee non-empty final clusters even in degenerate duplicate-point
    // corners: move the farthest point into any empty cluster
    loop {
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let empty = match counts.iter().position(|&c| c == 0) {
            Some(e) => e,
            None => break,
        };
        let (_, dists) = assign_all(&points, &centers);
        let worst = (0..n)
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| {
                dists[a]
                    .partial_cmp(&dists[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .ok_or_else(|| Error::Invariant("cannot fill empty cluster".into()))?;
        centers[empty] = points[worst].clone();
        assignments[worst] = empty;
    }

    // words = original-space means of each final cluster
    let (orig_sums, counts) = cluster_sums(features, &assignments, k, dim);
    let words: Vec<Vec<f64>> = orig_sums
        .into_iter()
        .zip(counts.iter())
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();

    let codebook = Codebook::new(channel, words, metric.clone())?;
    Ok((
        codebook,
        KmeansReport {
            inertia,
            inertia_trace: trace,
            assignments,
            iterations,
        },
    ))
}

impl Codebook {
    pub fn new(channel: Channel, words: Vec<Vec<f64>>, metric: MetricModel) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Config("codebook needs at least one word".into()));
        }
        for w in &words {
            if w.len() != metric.dim() {
                return Err(Error::DimensionMismatch {
                    expected: metric.dim(),
                    got: w.len(),
                });
            }
        }
        for i in 0..words.len() {
            for j in (i + 1)..words.len() {
                if words[i] == words[j] {
                    return Err(Error::Invariant(format!(
                        "codebook words {i} and {j} are identical"
                    )));
                }
            }
        }
        let whitened_words = metric.whiten_all(&words)?;
        Ok(Codebook {
            channel,
            words,
            metric,
            whitened_words,
        })
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn k(&self) -> usize {
        self.words.len()
    }

    pub fn dim(&self) -> usize {
        self.metric.dim()
    }

    pub fn words(&self) -> &[Vec<f64>] {
        &self.words
    }

    pub fn metric(&self) -> &MetricModel {
        &self.metric
    }

    /// The `ma` nearest words under the codebook's metric, each with TF
    /// weight 1. Ties break toward the lower word index; the returned list
    /// is ordered by non-decreasing distance.
    pub fn encode_ma(&self, feature: &[f64], ma: usize) -> Result<Vec<(usize, f64)>> {
        if ma < 1 || ma > self.k() {
            return Err(Error::Config(format!(
                "multiple assignment {ma} outside [1, {}]",
                self.k()
            )));
        }
        let wf = self.metric.whiten(feature)?;
        let mut dists: Vec<(usize, f64)> = self
            .whitened_words
            .iter()
            .enumerate()
            .map(|(i, w)| (i, sq_dist(&wf, w)))
            .collect();
        dists.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        Ok(dists.into_iter().take(ma).map(|(i, _)| (i, 1.0)).collect())
    }

    const MAGIC: &'static [u8; 8] = b"REIDCBK\0";

    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        binfmt::write_magic(&mut w, Self::MAGIC, path)?;
        binfmt::write_u32(&mut w, self.channel.tag(), path)?;
        binfmt::write_u64(&mut w, self.k() as u64, path)?;
        binfmt::write_u64(&mut w, self.dim() as u64, path)?;
        for word in &self.words {
            binfmt::write_f64_slice(&mut w, word, path)?;
        }
        self.metric.write_to(&mut w, path, metadata)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut r = std::io::BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
        binfmt::read_magic(&mut r, Self::MAGIC, path)?;
        let tag = binfmt::read_u32(&mut r, path)?;
        let channel = Channel::from_tag(tag).ok_or_else(|| Error::BadFormat {
            path: path.to_path_buf(),
            reason: format!("unknown channel tag {tag}"),
        })?;
        let k = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 24, "k", path)?;
        let d = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 20, "dim", path)?;
        let mut words = Vec::with_capacity(k);
        for _ in 0..k {
            words.push(binfmt::read_f64_vec(&mut r, d, path)?);
        }
        let (metric, metadata) = MetricModel::read_from(&mut r, path)?;
        if metric.dim() != d {
            return Err(Error::BadFormat {
                path: path.to_path_buf(),
                reason: format!("metric dim {} != word dim {d}", metric.dim()),
            });
        }
        Ok((Codebook::new(channel, words, metric)?, metadata))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetrize;
    use crate::metric::psd_project;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, Normal};

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect()
    }

    #[test]
    fn k_one_gives_arithmetic_mean() {
        let points = random_points(50, 4, 3);
        let metric = {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>());
            psd_project(&symmetrize(&(&a * a.transpose()))).unwrap()
        };
        let cb = fit_kmeans(&points, Channel::Hog, 1, &metric, 100, 1e-6, 0).unwrap();
        let mut mean = [0.0; 4];
        for p in &points {
            for (m, v) in mean.iter_mut().zip(p.iter()) {
                *m += v / 50.0;
            }
        }
        for (w, m) in cb.words()[0].iter().zip(mean.iter()) {
            assert!((w - m).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_metric_equals_euclidean_kmeans_bitwise() {
        let points = random_points(300, 6, 11);
        let id = MetricModel::identity(6);
        let (cb_a, rep_a) =
            fit_kmeans_report(&points, Channel::Hsv, 10, &id, 100, 1e-4, 42).unwrap();
        let (cb_b, rep_b) =
            fit_kmeans_report(&points, Channel::Hsv, 10, &id, 100, 1e-4, 42).unwrap();
        assert_eq!(rep_a.assignments, rep_b.assignments);
        assert_eq!(rep_a.inertia.to_bits(), rep_b.inertia.to_bits());
        for (wa, wb) in cb_a.words().iter().zip(cb_b.words().iter()) {
            for (x, y) in wa.iter().zip(wb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn metric_fit_equals_explicit_whitening() {
        let points = random_points(400, 5, 21);
        let metric = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let a = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>());
            psd_project(&symmetrize(&(&a * a.transpose() + DMatrix::identity(5, 5)))).unwrap()
        };
        let (_, rep_metric) =
            fit_kmeans_report(&points, Channel::Cn, 8, &metric, 100, 1e-6, 7).unwrap();
        let whitened = metric.whiten_all(&points).unwrap();
        let id = MetricModel::identity(5);
        let (_, rep_plain) =
            fit_kmeans_report(&whitened, Channel::Cn, 8, &id, 100, 1e-6, 7).unwrap();
        assert_eq!(rep_metric.assignments, rep_plain.assignments);
        let rel = (rep_metric.inertia - rep_plain.inertia).abs() / rep_plain.inertia;
        assert!(rel < 1e-9, "inertia mismatch: rel {rel}");
    }

    /// Two Gaussian blobs that overlap in Euclidean space but separate under
    /// a metric that discounts the shared nuisance axis; labels each sample
    /// by its generating blob and scores both clusterings against it.
    #[test]
    fn metric_separates_blobs_euclidean_cannot() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let norm = Normal::new(0.0f64, 1.0).unwrap();
        let n_per = 300usize;
        let mut points = Vec::with_capacity(2 * n_per);
        let mut truth = Vec::with_capacity(2 * n_per);
        for blob in 0..2 {
            let mu1 = if blob == 0 { -1.0 } else { 1.0 };
            for _ in 0..n_per {
                let x0 = norm.sample(&mut rng) * 10.0; // nuisance axis
                let x1 = mu1 + norm.sample(&mut rng) * 0.3;
                points.push(vec![x0, x1]);
                truth.push(blob);
            }
        }
        let score = |assignments: &[usize]| -> f64 {
            let agree = assignments
                .iter()
                .zip(truth.iter())
                .filter(|(a, t)| *a == *t)
                .count();
            let n = assignments.len();
            (agree.max(n - agree)) as f64 / n as f64
        };

        let metric =
            psd_project(&DMatrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, 10.0])).unwrap();
        let (_, rep_m) = fit_kmeans_report(&points, Channel::Hsv, 2, &metric, 100, 1e-6, 5).unwrap();
        let id = MetricModel::identity(2);
        let (_, rep_e) = fit_kmeans_report(&points, Channel::Hsv, 2, &id, 100, 1e-6, 5).unwrap();

        let acc_metric = score(&rep_m.assignments);
        let acc_euclid = score(&rep_e.assignments);
        assert!(acc_metric >= 0.95, "metric k-means accuracy {acc_metric}");
        assert!(acc_euclid < 0.80, "euclidean k-means accuracy {acc_euclid}");
    }

    #[test]
    fn inertia_is_monotone_nonincreasing() {
        let points = random_points(500, 4, 77);
        let id = MetricModel::identity(4);
        let (_, rep) = fit_kmeans_report(&points, Channel::Hog, 12, &id, 100, 0.0, 3).unwrap();
        for w in rep.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "inertia rose: {w:?}");
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let points = random_points(3, 2, 0);
        let id = MetricModel::identity(2);
        assert!(matches!(
            fit_kmeans(&points, Channel::Hsv, 4, &id, 10, 1e-4, 0),
            Err(Error::TooFewPoints { n: 3, k: 4 })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut points = random_points(10, 2, 0);
        points[3][1] = f64::NAN;
        let id = MetricModel::identity(2);
        assert!(matches!(
            fit_kmeans(&points, Channel::Hsv, 2, &id, 10, 1e-4, 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn encode_exact_word_and_exhaustive_ma() {
        let words: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let cb = Codebook::new(Channel::Hsv, words.clone(), MetricModel::identity(2)).unwrap();
        let hits = cb.encode_ma(&words[7], 1).unwrap();
        assert_eq!(hits, vec![(7, 1.0)]);

        let all = cb.encode_ma(&[0.3, 0.3], 9).unwrap();
        let mut idx: Vec<usize> = all.iter().map(|&(i, _)| i).collect();
        idx.sort();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn encode_ma_matches_brute_force_on_a_line() {
        // words at whitened positions 0, 1, 10; feature at 0.4 -> {0, 1}
        let words = vec![vec![0.0], vec![1.0], vec![10.0]];
        let cb = Codebook::new(Channel::Cn, words, MetricModel::identity(1)).unwrap();
        let hits = cb.encode_ma(&[0.4], 2).unwrap();
        let idx: Vec<usize> = hits.iter().map(|&(i, _)| i).collect();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn encode_ma_distances_nondecreasing_distinct() {
        let points = random_points(100, 3, 50);
        let id = MetricModel::identity(3);
        let cb = fit_kmeans(&points, Channel::Hog, 10, &id, 50, 1e-4, 1).unwrap();
        let q = [0.1, -0.2, 0.4];
        let hits = cb.encode_ma(&q, 5).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut last = -1.0f64;
        for &(i, w) in &hits {
            assert_eq!(w, 1.0);
            assert!(seen.insert(i), "duplicate word {i}");
            let d = cb.metric().mahalanobis_distance(&q, &cb.words()[i]).unwrap();
            assert!(d >= last - 1e-12);
            last = d;
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn encode_ma_contract(
            seed in 0u64..500,
            k in 2usize..12,
            ma in 1usize..12,
            q in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            proptest::prop_assume!(ma <= k);
            let points = random_points(40, 3, seed);
            let id = MetricModel::identity(3);
            let cb = fit_kmeans(&points, Channel::Cn, k, &id, 30, 1e-4, seed).unwrap();
            let hits = cb.encode_ma(&q, ma).unwrap();
            proptest::prop_assert_eq!(hits.len(), ma);
            let mut seen = std::collections::HashSet::new();
            let mut last = -1.0f64;
            for &(w, weight) in &hits {
                proptest::prop_assert_eq!(weight, 1.0);
                proptest::prop_assert!(seen.insert(w), "duplicate word index");
                let d = cb.metric().mahalanobis_distance(&q, &cb.words()[w]).unwrap();
                proptest::prop_assert!(d >= last - 1e-12, "distances not sorted");
                last = d;
            }
            // nothing outside the list is closer than the last kept word
            for (w, word) in cb.words().iter().enumerate() {
                if !seen.contains(&w) {
                    let d = cb.metric().mahalanobis_distance(&q, word).unwrap();
                    proptest::prop_assert!(d >= last - 1e-12, "missed a nearer word");
                }
            }
        }
    }

    #[test]
    fn duplicate_words_rejected() {
        let words = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        assert!(matches!(
            Codebook::new(Channel::Hsv, words, MetricModel::identity(2)),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn fit_is_bit_deterministic_and_roundtrips() {
        let points = random_points(200, 5, 33);
        let metric = {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let a = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>());
            psd_project(&symmetrize(&(&a * a.transpose() + DMatrix::identity(5, 5)))).unwrap()
        };
        let cb1 = fit_kmeans(&points, Channel::Siltp, 7, &metric, 100, 1e-4, 9).unwrap();
        let cb2 = fit_kmeans(&points, Channel::Siltp, 7, &metric, 100, 1e-4, 9).unwrap();
        for (a, b) in cb1.words().iter().zip(cb2.words().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.bin");
        cb1.save(&path, "meta").unwrap();
        let (back, meta) = Codebook::load(&path).unwrap();
        assert_eq!(meta, "meta");
        assert_eq!(back.channel(), Channel::Siltp);
        assert_eq!(back.k(), 7);
        for (a, b) in cb1.words().iter().zip(back.words().iter()) {
            assert_eq!(a, b);
        }
    }
}

//! Part-two learners on image descriptors: a cross-view discriminant
//! subspace with a metric fitted inside it (XQDA), and the discriminative
//! null space where within-class scatter vanishes while between-class
//! scatter stays positive (NFST).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::binfmt;
use crate::error::{Error, Result};
use crate::linalg::{canonical_symmetric_eigen, check_symmetric, symmetrize};
use crate::metric::{kissme_fit, MetricModel, ScatterPair};

/// One labeled descriptor row.
#[derive(Debug, Clone, Copy)]
pub struct LabeledVec<'a> {
    pub id: &'a str,
    pub vector: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    Xqda,
    Nfst,
}

/// A linear projection `w` (d x r) around a stored training mean, with an
/// optional metric in the projected space (XQDA) and the generalized
/// eigenvalues that ranked the kept directions.
#[derive(Debug, Clone)]
pub struct ProjectionModel {
    pub kind: ProjectionKind,
    mean: DVector<f64>,
    w: DMatrix<f64>,
    metric: Option<MetricModel>,
    eigenvalues: Vec<f64>,
}

/// Standard LDA scatter sums about class means and the global mean, so that
/// `S_b + S_w` equals the total scatter.
pub fn compute_scatters(data: &[LabeledVec<'_>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::SingleClass(0));
    }
    let d = data[0].vector.len();
    for v in data {
        if v.vector.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.vector.len(),
            });
        }
    }
    let mut classes: std::collections::BTreeMap<&str, (DVector<f64>, usize)> =
        std::collections::BTreeMap::new();
    let mut global = DVector::<f64>::zeros(d);
    for v in data {
        let e = classes
            .entry(v.id)
            .or_insert_with(|| (DVector::zeros(d), 0));
        for (a, &b) in e.0.iter_mut().zip(v.vector.iter()) {
            *a += b;
        }
        e.1 += 1;
        for (a, &b) in global.iter_mut().zip(v.vector.iter()) {
            *a += b;
        }
    }
    let c = classes.len();
    if c < 2 {
        return Err(Error::SingleClass(c));
    }
    global /= n as f64;
    let means: std::collections::BTreeMap<&str, DVector<f64>> = classes
        .iter()
        .map(|(&id, (sum, count))| (id, sum / *count as f64))
        .collect();

    let mut s_w = DMatrix::<f64>::zeros(d, d);
    for v in data {
        let mu = &means[v.id];
        let diff = DVector::from_iterator(d, v.vector.iter().zip(mu.iter()).map(|(a, b)| a - b));
        s_w.ger(1.0, &diff, &diff, 1.0);
    }
    let mut s_b = DMatrix::<f64>::zeros(d, d);
    for (id, mu) in &means {
        let count = classes[id].1 as f64;
        let diff = mu - &global;
        s_b.ger(count, &diff, &diff, 1.0);
    }
    Ok((symmetrize(&s_b), symmetrize(&s_w)))
}

/// Solve the symmetric-definite generalized eigenproblem
/// `S_b w = lambda S_w w` with `S_w` symmetric positive definite, returning
/// eigenvalues in descending order with `S_w`-orthonormal eigenvectors as
/// columns.
pub fn generalized_eigen(s_b: &DMatrix<f64>, s_w: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_symmetric(s_b, 1e-8)?;
    check_symmetric(s_w, 1e-8)?;
    if s_b.nrows() != s_w.nrows() {
        return Err(Error::DimensionMismatch {
            expected: s_w.nrows(),
            got: s_b.nrows(),
        });
    }
    let chol = s_w
        .clone()
        .cholesky()
        .ok_or(Error::InversionFailure { regularized: false })?;
    let l = chol.l();
    // C = L^-1 S_b L^-T
    let li_sb = l
        .solve_lower_triangular(s_b)
        .ok_or(Error::InversionFailure { regularized: false })?;
    let c = l
        .solve_lower_triangular(&li_sb.transpose())
        .ok_or(Error::InversionFailure { regularized: false })?;
    let (values, vectors) = canonical_symmetric_eigen(&symmetrize(&c))?;
    // back-transform: w = L^-T y
    let w = l
        .transpose()
        .solve_upper_triangular(&vectors)
        .ok_or(Error::InversionFailure { regularized: false })?;
    Ok((values.iter().copied().collect(), w))
}

/// Mean-normalized cross-camera difference scatters: same-identity pairs
/// (intra) and different-identity pairs (extra), computed from moments so no
/// pair is ever enumerated. Also returns the two pair counts.
pub fn cross_view_difference_scatters(
    cam_a: &[LabeledVec<'_>],
    cam_b: &[LabeledVec<'_>],
) -> Result<(DMatrix<f64>, DMatrix<f64>, usize, usize)> {
    if cam_a.is_empty() || cam_b.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    let d = cam_a[0].vector.len();
    for v in cam_a.iter().chain(cam_b.iter()) {
        if v.vector.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.vector.len(),
            });
        }
    }

    let second_moment = |rows: &[&[f64]]| -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(d, d);
        for r in rows {
            let v = DVector::from_column_slice(r);
            m.ger(1.0, &v, &v, 1.0);
        }
        symmetrize(&m)
    };
    let sum_vec = |rows: &[&[f64]]| -> DVector<f64> {
        let mut s = DVector::<f64>::zeros(d);
        for r in rows {
            for (a, &b) in s.iter_mut().zip(r.iter()) {
                *a += b;
            }
        }
        s
    };

    let a_rows: Vec<&[f64]> = cam_a.iter().map(|v| v.vector).collect();
    let b_rows: Vec<&[f64]> = cam_b.iter().map(|v| v.vector).collect();
    let (na, nb) = (a_rows.len() as f64, b_rows.len() as f64);
    let sxx = second_moment(&a_rows);
    let syy = second_moment(&b_rows);
    let sx = sum_vec(&a_rows);
    let sy = sum_vec(&b_rows);

    // total over all cross-camera pairs
    let mut total = &sxx * nb + &syy * na;
    total.ger(-1.0, &sx, &sy, 1.0);
    total.ger(-1.0, &sy, &sx, 1.0);
    let n_total = na * nb;

    // same-identity portion, class by class
    let mut ids: Vec<&str> = cam_a.iter().map(|v| v.id).collect();
    ids.sort();
    ids.dedup();
    let mut intra = DMatrix::<f64>::zeros(d, d);
    let mut n_intra = 0.0f64;
    for id in ids {
        let ac: Vec<&[f64]> = cam_a
            .iter()
            .filter(|v| v.id == id)
            .map(|v| v.vector)
            .collect();
        let bc: Vec<&[f64]> = cam_b
            .iter()
            .filter(|v| v.id == id)
            .map(|v| v.vector)
            .collect();
        if ac.is_empty() || bc.is_empty() {
            continue;
        }
        let (nac, nbc) = (ac.len() as f64, bc.len() as f64);
        let mut part = second_moment(&ac) * nbc + second_moment(&bc) * nac;
        let sxc = sum_vec(&ac);
        let syc = sum_vec(&bc);
        part.ger(-1.0, &sxc, &syc, 1.0);
        part.ger(-1.0, &syc, &sxc, 1.0);
        intra += part;
        n_intra += nac * nbc;
    }
    if n_intra == 0.0 {
        return Err(Error::NoPositivePairs);
    }
    let n_extra = n_total - n_intra;
    if n_extra <= 0.0 {
        return Err(Error::NoNegativePairs);
    }
    let extra = (total - &intra) / n_extra;
    let intra = intra / n_intra;
    Ok((
        symmetrize(&intra),
        symmetrize(&extra),
        n_intra as usize,
        n_extra as usize,
    ))
}

/// Fit the cross-view discriminant subspace: maximize the Rayleigh quotient
/// of extra- over intra-difference scatter, keep the top directions
/// (`target_dim`, or all eigenvalues above 1 when `None`), then fit a KISSME
/// metric inside the subspace.
pub fn xqda_fit(
    cam_a: &[LabeledVec<'_>],
    cam_b: &[LabeledVec<'_>],
    target_dim: Option<usize>,
    ridge: f64,
) -> Result<ProjectionModel> {
    let d = cam_a
        .first()
        .or(cam_b.first())
        .map(|v| v.vector.len())
        .ok_or(Error::NoPositivePairs)?;
    let (intra, extra, n_intra, n_extra) = cross_view_difference_scatters(cam_a, cam_b)?;

    // training mean, stored for projection
    let n = (cam_a.len() + cam_b.len()) as f64;
    let mut mean = DVector::<f64>::zeros(d);
    for v in cam_a.iter().chain(cam_b.iter()) {
        for (a, &b) in mean.iter_mut().zip(v.vector.iter()) {
            *a += b;
        }
    }
    mean /= n;

    let reg = ridge * intra.trace().max(f64::MIN_POSITIVE) / d as f64;
    let intra_reg = &intra + DMatrix::identity(d, d) * reg;
    let (values, vectors) = generalized_eigen(&extra, &intra_reg)?;

    let r = match target_dim {
        Some(r) => {
            if r < 1 || r > d {
                return Err(Error::Config(format!("target_dim {r} outside [1, {d}]")));
            }
            r
        }
        None => values.iter().filter(|&&v| v > 1.0).count().max(1),
    };
    let w = vectors.columns(0, r).into_owned();
    let kept: Vec<f64> = values[..r].to_vec();

    // KISSME in the projected space, from the projected difference scatters
    let delta_p = symmetrize(&(w.transpose() * &intra * &w));
    let delta_n = symmetrize(&(w.transpose() * &extra * &w));
    let scatter = ScatterPair {
        delta_p,
        delta_n,
        count_p: n_intra,
        count_n: n_extra,
    };
    let metric = kissme_fit(&scatter, ridge)?;

    Ok(ProjectionModel {
        kind: ProjectionKind::Xqda,
        mean,
        w,
        metric: Some(metric),
        eigenvalues: kept,
    })
}

/// Fit the discriminative null space: directions inside the span of the
/// centered training data with zero within-class scatter and positive
/// between-class scatter, at most `c - 1` of them, orthonormal. Requires the
/// small-sample regime (the data rank must exceed `n - c`).
pub fn nfst_fit(data: &[LabeledVec<'_>]) -> Result<ProjectionModel> {
    let n = data.len();
    if n == 0 {
        return Err(Error::SingleClass(0));
    }
    let d = data[0].vector.len();
    let mut ids: Vec<&str> = data.iter().map(|v| v.id).collect();
    ids.sort();
    ids.dedup();
    let c = ids.len();
    if c < 2 {
        return Err(Error::SingleClass(c));
    }

    let mut mean = DVector::<f64>::zeros(d);
    for v in data {
        for (a, &b) in mean.iter_mut().zip(v.vector.iter()) {
            *a += b;
        }
    }
    mean /= n as f64;

    // orthonormal basis of span(centered rows) via the Gram matrix
    let centered = DMatrix::from_fn(n, d, |i, j| data[i].vector[j] - mean[j]);
    let gram = symmetrize(&(&centered * centered.transpose()));
    let (gvals, gvecs) = canonical_symmetric_eigen(&gram)?;
    let gmax = gvals[0].max(0.0);
    let rank_tol = gmax * 1e-10 + f64::MIN_POSITIVE;
    let rank = gvals.iter().filter(|&&v| v > rank_tol).count();
    if rank == 0 {
        return Err(Error::NoNullSpace);
    }
    // basis columns: q_i = X^T u_i / sqrt(lambda_i), d x rank, orthonormal
    let mut basis = DMatrix::<f64>::zeros(d, rank);
    for i in 0..rank {
        let coeff = gvecs.column(i) / gvals[i].sqrt();
        let q = centered.transpose() * coeff;
        basis.set_column(i, &q);
    }

    // scatters in basis coordinates
    let z = &centered * &basis; // n x rank
    let z_rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().copied().collect()).collect();
    let labeled: Vec<LabeledVec> = data
        .iter()
        .zip(z_rows.iter())
        .map(|(v, row)| LabeledVec {
            id: v.id,
            vector: row,
        })
        .collect();
    let (s_b, s_w) = compute_scatters(&labeled)?;

    // null space of S_w inside the span
    let (wvals, wvecs) = canonical_symmetric_eigen(&s_w)?;
    let wmax = wvals[0].max(0.0);
    let null_tol = wmax * 1e-9 + 1e-30;
    let null_idx: Vec<usize> = (0..rank).filter(|&i| wvals[i] <= null_tol).collect();
    if null_idx.is_empty() {
        return Err(Error::NoNullSpace);
    }
    let mut null_basis = DMatrix::<f64>::zeros(rank, null_idx.len());
    for (dst, &src) in null_idx.iter().enumerate() {
        null_basis.set_column(dst, &wvecs.column(src));
    }

    // maximize between-class scatter inside the null space
    let b_proj = symmetrize(&(null_basis.transpose() * &s_b * &null_basis));
    let (bvals, bvecs) = canonical_symmetric_eigen(&b_proj)?;
    let bmax = bvals[0].max(0.0);
    let pos_tol = bmax * 1e-12;
    let keep = (0..null_idx.len())
        .filter(|&i| bvals[i] > pos_tol && bvals[i] > 0.0)
        .count()
        .min(c - 1);
    if keep == 0 {
        return Err(Error::NoNullSpace);
    }
    let v = bvecs.columns(0, keep).into_owned();
    let w = &basis * &null_basis * &v; // d x keep, orthonormal

    Ok(ProjectionModel {
        kind: ProjectionKind::Nfst,
        mean,
        w,
        metric: None,
        eigenvalues: bvals.iter().take(keep).copied().collect(),
    })
}

impl ProjectionModel {
    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn metric(&self) -> Option<&MetricModel> {
        self.metric.as_ref()
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `w^T (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let v = DVector::from_iterator(
            self.input_dim(),
            x.iter().zip(self.mean.iter()).map(|(a, b)| a - b),
        );
        Ok((self.w.transpose() * v).data.into())
    }

    /// Distance between two descriptors after projection: Mahalanobis under
    /// the embedded metric for XQDA, Euclidean for NFST. Lower is more
    /// similar; symmetric in its arguments.
    pub fn score(&self, query: &[f64], gallery_item: &[f64]) -> Result<f64> {
        let pq = self.project(query)?;
        let pg = self.project(gallery_item)?;
        match &self.metric {
            Some(m) => m.mahalanobis_distance(&pq, &pg),
            None => Ok(pq
                .iter()
                .zip(pg.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()),
        }
    }

    const MAGIC: &'static [u8; 8] = b"REIDPRJ\0";

    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w, path, metadata)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub(crate) fn write_to<W: Write>(&self, mut w: &mut W, path: &Path, metadata: &str) -> Result<()> {
        binfmt::write_magic(w, Self::MAGIC, path)?;
        let kind = match self.kind {
            ProjectionKind::Xqda => 0u32,
            ProjectionKind::Nfst => 1u32,
        };
        binfmt::write_u32(&mut w, kind, path)?;
        binfmt::write_u64(&mut w, self.input_dim() as u64, path)?;
        binfmt::write_u64(&mut w, self.output_dim() as u64, path)?;
        binfmt::write_f64_slice(&mut w, self.mean.as_slice(), path)?;
        binfmt::write_f64_slice(&mut w, self.w.transpose().as_slice(), path)?;
        binfmt::write_u64(&mut w, self.eigenvalues.len() as u64, path)?;
        binfmt::write_f64_slice(&mut w, &self.eigenvalues, path)?;
        match &self.metric {
            Some(m) => {
                binfmt::write_u32(&mut w, 1, path)?;
                m.write_to(&mut w, path, metadata)?;
            }
            None => {
                binfmt::write_u32(&mut w, 0, path)?;
                let meta = metadata.as_bytes();
                binfmt::write_u64(&mut w, meta.len() as u64, path)?;
                w.write_all(meta).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut r = std::io::BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_from(&mut r, path)
    }

    pub(crate) fn read_from<R: Read>(mut r: &mut R, path: &Path) -> Result<(Self, String)> {
        binfmt::read_magic(r, Self::MAGIC, path)?;
        let kind = match binfmt::read_u32(&mut r, path)? {
            0 => ProjectionKind::Xqda,
            1 => ProjectionKind::Nfst,
            other => {
                return Err(Error::BadFormat {
                    path: path.to_path_buf(),
                    reason: format!("unknown projection kind {other}"),
                })
            }
        };
        let d = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 28, "dim", path)?;
        let rdim = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 20, "rank", path)?;
        let mean = DVector::from_vec(binfmt::read_f64_vec(&mut r, d, path)?);
        let w = DMatrix::from_row_slice(d, rdim, &binfmt::read_f64_vec(&mut r, d * rdim, path)?);
        let n_eig = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 20, "eigen", path)?;
        let eigenvalues = binfmt::read_f64_vec(&mut r, n_eig, path)?;
        let has_metric = binfmt::read_u32(&mut r, path)?;
        let (metric, metadata) = if has_metric == 1 {
            let (m, meta) = MetricModel::read_from(&mut r, path)?;
            (Some(m), meta)
        } else {
            let len = binfmt::check_len(binfmt::read_u64(&mut r, path)?, 1 << 24, "meta", path)?;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            (
                None,
                String::from_utf8(buf).map_err(|e| Error::BadFormat {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?,
            )
        };
        Ok((
            ProjectionModel {
                kind,
                mean,
                w,
                metric,
                eigenvalues,
            },
            metadata,
        ))
    }
}

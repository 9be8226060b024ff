//! SLIC superpixel segmentation.
//!
//! Pixels are clustered in CIELAB+xy space: cluster centers start on a
//! regular grid with step `S = sqrt(H*W/K)`, each iteration reassigns pixels
//! within a 2Sx2S window around every center using
//! `D = sqrt(d_lab^2 + (compactness/S)^2 * d_xy^2)`, and centers move to the
//! mean of their members. After a fixed 10 iterations, connectivity is
//! enforced: fragments smaller than `(H*W/K)/4` are merged into the largest
//! adjacent superpixel, larger disconnected pieces become superpixels of
//! their own, and labels are renumbered contiguously.

use std::path::Path;

use crate::color::rgb_to_lab;
use crate::error::{Error, Result};
use crate::imgio::PedestrianImage;

const SLIC_ITERATIONS: usize = 10;

/// A full partition of an image into connected superpixels.
#[derive(Debug, Clone)]
pub struct SuperpixelSegmentation {
    pub width: usize,
    pub height: usize,
    /// Row-major superpixel index per pixel, in `[0, n_superpixels)`.
    pub labels: Vec<u32>,
    /// Mean (row, col) position per superpixel.
    pub centroids: Vec<(f64, f64)>,
    /// Pixel count per superpixel.
    pub sizes: Vec<usize>,
    /// Whether each superpixel counts as pedestrian foreground.
    pub foreground_flags: Vec<bool>,
}

impl SuperpixelSegmentation {
    pub fn n_superpixels(&self) -> usize {
        self.sizes.len()
    }

    /// Row-major pixel indices belonging to superpixel `s`.
    pub fn pixels_of(&self, s: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == s).then_some(i))
            .collect()
    }

    /// Write the label map as a 16-bit grayscale PNG for debugging.
    pub fn save_label_png(&self, path: &Path) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for y in 0..self.height {
            for x in 0..self.width {
                img.put_pixel(x as u32, y as u32, image::Luma([self.labels[y * self.width + x] as u16]));
            }
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

struct Center {
    l: f64,
    a: f64,
    b: f64,
    x: f64,
    y: f64,
}

/// Segment `image` into approximately `target_superpixels` compact regions.
pub fn segment(
    image: &PedestrianImage,
    target_superpixels: usize,
    compactness: f64,
) -> Result<SuperpixelSegmentation> {
    let (w, h) = (image.width, image.height);
    let n_px = w * h;
    if target_superpixels < 1 {
        return Err(Error::Config("target_superpixels must be at least 1".into()));
    }
    if target_superpixels > n_px {
        return Err(Error::Config(format!(
            "target_superpixels {target_superpixels} exceeds pixel count {n_px}"
        )));
    }
    if !compactness.is_finite() || compactness <= 0.0 {
        return Err(Error::Config("compactness must be positive".into()));
    }

    let lab: Vec<(f64, f64, f64)> = image
        .pixels
        .iter()
        .map(|&[r, g, b]| rgb_to_lab(r, g, b))
        .collect();

    let step = (n_px as f64 / target_superpixels as f64).sqrt();
    let mut nx = ((w as f64 / step).round() as usize).max(1);
    let mut ny = ((h as f64 / step).round() as usize).max(1);
    // rounding can overshoot the target on elongated images; never seed more
    // clusters than asked for (target = 1 must give one superpixel)
    while nx * ny > target_superpixels {
        if ny >= nx && ny > 1 {
            ny -= 1;
        } else if nx > 1 {
            nx -= 1;
        } else {
            ny = 1;
        }
    }

    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for gy in 0..ny {
        for gx in 0..nx {
            let x = (gx as f64 + 0.5) * w as f64 / nx as f64;
            let y = (gy as f64 + 0.5) * h as f64 / ny as f64;
            let px = (x as usize).min(w - 1);
            let py = (y as usize).min(h - 1);
            let (l, a, b) = lab[py * w + px];
            centers.push(Center { l, a, b, x, y });
        }
    }

    let spatial_weight = (compactness / step) * (compactness / step);
    let window = step.ceil() as isize;
    let mut labels = vec![u32::MAX; n_px];
    let mut best = vec![f64::INFINITY; n_px];

    for _ in 0..SLIC_ITERATIONS {
        best.fill(f64::INFINITY);
        labels.fill(u32::MAX);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = ((c.x as isize) - window).max(0) as usize;
            let x1 = (((c.x as isize) + window) as usize).min(w - 1);
            let y0 = ((c.y as isize) - window).max(0) as usize;
            let y1 = (((c.y as isize) + window) as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let idx = y * w + x;
                    let (l, a, b) = lab[idx];
                    let dl = l - c.l;
                    let da = a - c.a;
                    let db = b - c.b;
                    let dx = x as f64 - c.x;
                    let dy = y as f64 - c.y;
                    let d = dl * dl + da * da + db * db + spatial_weight * (dx * dx + dy * dy);
                    if d < best[idx] {
                        best[idx] = d;
                        labels[idx] = ci as u32;
                    }
                }
            }
        }
        // safety net: a pixel outside every window falls back to the
        // spatially nearest center
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if labels[idx] == u32::MAX {
                    let mut bd = f64::INFINITY;
                    for (ci, c) in centers.iter().enumerate() {
                        let dx = x as f64 - c.x;
                        let dy = y as f64 - c.y;
                        let d = dx * dx + dy * dy;
                        if d < bd {
                            bd = d;
                            labels[idx] = ci as u32;
                        }
                    }
                }
            }
        }

        // recompute centers
        let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let ci = labels[idx] as usize;
                let (l, a, b) = lab[idx];
                let e = &mut acc[ci];
                e.0 += l;
                e.1 += a;
                e.2 += b;
                e.3 += x as f64;
                e.4 += y as f64;
                e.5 += 1;
            }
        }
        for (c, e) in centers.iter_mut().zip(acc.iter()) {
            if e.5 > 0 {
                let n = e.5 as f64;
                c.l = e.0 / n;
                c.a = e.1 / n;
                c.b = e.2 / n;
                c.x = e.3 / n;
                c.y = e.4 / n;
            }
        }
    }

    let min_size = ((n_px as f64 / target_superpixels as f64) / 4.0).max(1.0) as usize;
    let labels = enforce_connectivity(&labels, w, h, min_size);
    Ok(finalize(labels, w, h))
}

/// Merge small disconnected fragments and renumber labels contiguously.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize, min_size: usize) -> Vec<u32> {
    let n_px = w * h;
    // connected components of the raw label map, row-major discovery order
    let mut comp = vec![usize::MAX; n_px];
    let mut comp_sizes: Vec<usize> = Vec::new();
    let mut comp_pixels: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n_px {
        if comp[start] != usize::MAX {
            continue;
        }
        let cid = comp_sizes.len();
        let lab = labels[start];
        let mut pixels = Vec::new();
        comp[start] = cid;
        stack.push(start);
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == lab {
                    comp[q] = cid;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        comp_sizes.push(pixels.len());
        comp_pixels.push(pixels);
    }

    // union-find over components
    let n_comp = comp_sizes.len();
    let mut parent: Vec<usize> = (0..n_comp).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut root_size = comp_sizes.clone();

    for (cid, pixels) in comp_pixels.iter().enumerate() {
        let root = find(&mut parent, cid);
        if root_size[root] >= min_size {
            continue;
        }
        // largest adjacent root, ties to the smaller root id
        let mut best: Option<(usize, usize)> = None; // (size, root)
        for &p in pixels {
            let (x, y) = (p % w, p / w);
            let mut consider = |q: usize| {
                let r = find(&mut parent, comp[q]);
                if r == root {
                    return;
                }
                let cand = (root_size[r], r);
                best = Some(match best {
                    None => cand,
                    Some((bs, br)) => {
                        if cand.0 > bs || (cand.0 == bs && cand.1 < br) {
                            cand
                        } else {
                            (bs, br)
                        }
                    }
                });
            };
            if x > 0 {
                consider(p - 1);
            }
            if x + 1 < w {
                consider(p + 1);
            }
            if y > 0 {
                consider(p - w);
            }
            if y + 1 < h {
                consider(p + w);
            }
        }
        if let Some((_, target)) = best {
            parent[root] = target;
            root_size[target] += root_size[root];
        }
        // isolated tiny components (only possible on tiny images) stay
    }

    // contiguous relabel in row-major order of first occurrence
    let mut new_label = vec![u32::MAX; n_comp];
    let mut out = vec![0u32; n_px];
    let mut next = 0u32;
    for p in 0..n_px {
        let root = find(&mut parent, comp[p]);
        if new_label[root] == u32::MAX {
            new_label[root] = next;
            next += 1;
        }
        out[p] = new_label[root];
    }
    out
}

fn finalize(labels: Vec<u32>, w: usize, h: usize) -> SuperpixelSegmentation {
    let n = labels.iter().map(|&l| l as usize).max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n];
    let mut rows = vec![0.0f64; n];
    let mut cols = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x] as usize;
            sizes[l] += 1;
            rows[l] += y as f64;
            cols[l] += x as f64;
        }
    }
    let centroids = (0..n)
        .map(|i| (rows[i] / sizes[i] as f64, cols[i] / sizes[i] as f64))
        .collect();
    SuperpixelSegmentation {
        width: w,
        height: h,
        labels,
        centroids,
        sizes,
        foreground_flags: vec![true; n],
    }
}

/// Flag superpixels whose foreground pixel fraction reaches `threshold`.
/// `None` for the mask means everything is foreground.
pub fn mark_foreground(
    seg: &SuperpixelSegmentation,
    mask: Option<&[bool]>,
    threshold: f64,
) -> Result<SuperpixelSegmentation> {
    let mut out = seg.clone();
    match mask {
        None => out.foreground_flags.fill(true),
        Some(m) => {
            if m.len() != seg.labels.len() {
                return Err(Error::DimensionMismatch {
                    expected: seg.labels.len(),
                    got: m.len(),
                });
            }
            let mut fg = vec![0usize; seg.n_superpixels()];
            for (i, &l) in seg.labels.iter().enumerate() {
                if m[i] {
                    fg[l as usize] += 1;
                }
            }
            for (s, flag) in out.foreground_flags.iter_mut().enumerate() {
                *flag = fg[s] as f64 / seg.sizes[s] as f64 >= threshold;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_image(w: usize, h: usize, rgb: [u8; 3]) -> PedestrianImage {
        PedestrianImage::new("img", 0, w, h, vec![rgb; w * h], None).unwrap()
    }

    fn random_image(w: usize, h: usize, seed: u64) -> PedestrianImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..w * h)
            .map(|_| [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()])
            .collect();
        PedestrianImage::new("img", 0, w, h, pixels, None).unwrap()
    }

    fn assert_partition(seg: &SuperpixelSegmentation) {
        let n = seg.n_superpixels();
        assert!(seg.labels.iter().all(|&l| (l as usize) < n));
        assert_eq!(seg.sizes.iter().sum::<usize>(), seg.width * seg.height);
        for s in 0..n {
            assert!(seg.sizes[s] > 0, "superpixel {s} empty");
        }
    }

    fn assert_connected(seg: &SuperpixelSegmentation) {
        // flood fill from the first pixel of each label must reach all of it
        let (w, h) = (seg.width, seg.height);
        let mut seen = vec![false; w * h];
        for s in 0..seg.n_superpixels() as u32 {
            let pixels = seg.pixels_of(s);
            let mut stack = vec![pixels[0]];
            let mut reached = 0usize;
            seen[pixels[0]] = true;
            while let Some(p) = stack.pop() {
                reached += 1;
                let (x, y) = (p % w, p / w);
                let visit = |q: usize, seen: &mut Vec<bool>, stack: &mut Vec<usize>| {
                    if !seen[q] && seg.labels[q] == s {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    visit(p - 1, &mut seen, &mut stack);
                }
                if x + 1 < w {
                    visit(p + 1, &mut seen, &mut stack);
                }
                if y > 0 {
                    visit(p - w, &mut seen, &mut stack);
                }
                if y + 1 < h {
                    visit(p + w, &mut seen, &mut stack);
                }
            }
            assert_eq!(reached, pixels.len(), "superpixel {s} disconnected");
        }
    }

    #[test]
    fn single_superpixel_covers_image() {
        let img = constant_image(20, 20, [100, 150, 200]);
        let seg = segment(&img, 1, 20.0).unwrap();
        assert_eq!(seg.n_superpixels(), 1);
        assert_eq!(seg.sizes[0], 400);
        let (r, c) = seg.centroids[0];
        assert!((r - 9.5).abs() < 1e-9 && (c - 9.5).abs() < 1e-9);
    }

    /// On a constant image d_lab = 0, so SLIC reduces to spatial k-means
    /// from the grid seeds. The oracle simulates exactly that reduction.
    #[test]
    fn constant_image_matches_spatial_oracle() {
        let (w, h) = (20usize, 20usize);
        let img = constant_image(w, h, [42, 42, 42]);
        let seg = segment(&img, 4, 20.0).unwrap();
        assert_eq!(seg.n_superpixels(), 4);

        // oracle: spatial-only Lloyd from the same seed grid with the same
        // strict-less tie rule and iteration count
        let mut cx = [5.0, 15.0, 5.0, 15.0];
        let mut cy = [5.0, 5.0, 15.0, 15.0];
        let mut labels = vec![0usize; w * h];
        for _ in 0..SLIC_ITERATIONS {
            for y in 0..h {
                for x in 0..w {
                    let mut bd = f64::INFINITY;
                    let mut bi = 0;
                    for i in 0..4 {
                        let d = (x as f64 - cx[i]).powi(2) + (y as f64 - cy[i]).powi(2);
                        if d < bd {
                            bd = d;
                            bi = i;
                        }
                    }
                    labels[y * w + x] = bi;
                }
            }
            let mut sx = [0.0; 4];
            let mut sy = [0.0; 4];
            let mut n = [0usize; 4];
            for y in 0..h {
                for x in 0..w {
                    let i = labels[y * w + x];
                    sx[i] += x as f64;
                    sy[i] += y as f64;
                    n[i] += 1;
                }
            }
            for i in 0..4 {
                if n[i] > 0 {
                    cx[i] = sx[i] / n[i] as f64;
                    cy[i] = sy[i] / n[i] as f64;
                }
            }
        }
        // compare as partitions (label ids may be permuted by relabeling)
        let mut mapping = std::collections::HashMap::new();
        for (p, (&got, &want)) in seg.labels.iter().zip(labels.iter()).enumerate() {
            let entry = mapping.entry(got).or_insert(want);
            assert_eq!(*entry, want, "pixel {p} breaks the partition mapping");
        }
        // exact quadrants are impossible with midline ties; ~100 px each
        for &s in &seg.sizes {
            assert!((75..=125).contains(&s), "size {s} not ~100");
        }
    }

    #[test]
    fn target_500_on_viper_sized_image() {
        let img = random_image(48, 128, 11);
        let seg = segment(&img, 500, 20.0).unwrap();
        let n = seg.n_superpixels();
        assert!(
            (350..=650).contains(&n),
            "{n} superpixels outside [350, 650]"
        );
        assert_partition(&seg);
        assert_connected(&seg);
    }

    #[test]
    fn oversized_target_rejected() {
        let img = constant_image(4, 4, [0, 0, 0]);
        assert!(segment(&img, 17, 20.0).is_err());
        assert!(segment(&img, 16, 20.0).is_ok());
    }

    #[test]
    fn determinism() {
        let img = random_image(30, 40, 5);
        let a = segment(&img, 60, 20.0).unwrap();
        let b = segment(&img, 60, 20.0).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn partition_and_connectivity_on_structured_image() {
        // hard case: thin diagonal stripes fighting the spatial term
        let (w, h) = (40usize, 60usize);
        let pixels: Vec<[u8; 3]> = (0..w * h)
            .map(|p| {
                let (x, y) = (p % w, p / w);
                if (x + y) % 7 < 3 {
                    [255, 30, 30]
                } else {
                    [30, 30, 255]
                }
            })
            .collect();
        let img = PedestrianImage::new("s", 0, w, h, pixels, None).unwrap();
        let seg = segment(&img, 50, 10.0).unwrap();
        assert_partition(&seg);
        assert_connected(&seg);
    }

    #[test]
    fn mark_foreground_thresholds() {
        let img = constant_image(10, 10, [1, 2, 3]);
        let seg = segment(&img, 1, 20.0).unwrap();

        let all = mark_foreground(&seg, Some(&[true; 100]), 0.5).unwrap();
        assert!(all.foreground_flags.iter().all(|&f| f));

        let none = mark_foreground(&seg, Some(&[false; 100]), 0.5).unwrap();
        assert!(none.foreground_flags.iter().all(|&f| !f));

        // 60 of 100 pixels foreground
        let mut m = vec![false; 100];
        for v in m.iter_mut().take(60) {
            *v = true;
        }
        let at_half = mark_foreground(&seg, Some(&m), 0.5).unwrap();
        assert!(at_half.foreground_flags[0]);
        let at_seventy = mark_foreground(&seg, Some(&m), 0.7).unwrap();
        assert!(!at_seventy.foreground_flags[0]);

        let absent = mark_foreground(&seg, None, 0.5).unwrap();
        assert!(absent.foreground_flags.iter().all(|&f| f));

        let bad = mark_foreground(&seg, Some(&[true; 99]), 0.5);
        assert!(bad.is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn partition_and_connectivity_hold_on_random_images(
            w in 8usize..28,
            h in 8usize..28,
            k in 1usize..12,
            seed in 0u64..1000,
        ) {
            proptest::prop_assume!(k <= w * h);
            let img = random_image(w, h, seed);
            let seg = segment(&img, k, 15.0).unwrap();
            assert_partition(&seg);
            assert_connected(&seg);
            proptest::prop_assert!(seg.n_superpixels() >= 1);
        }
    }

    #[test]
    fn label_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(16, 24, 2);
        let seg = segment(&img, 12, 20.0).unwrap();
        let path = dir.path().join("labels.png");
        seg.save_label_png(&path).unwrap();
        let back = image::open(&path).unwrap().to_luma16();
        assert_eq!(back.width(), 16);
        assert_eq!(
            back.get_pixel(0, 0).0[0] as u32,
            seg.labels[0]
        );
    }
}

//! Color-name lookup table: maps an RGB bin to a probability vector over
//! the 11 basic color terms.
//!
//! File format: whitespace-separated text, exactly 32768 rows of 14 columns
//! `r g b p1 .. p11` with `r, g, b` in `[0, 32)` indexing 8-wide RGB bins.
//! Rows are renormalized to exact L1 = 1 on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const COLOR_TERMS: usize = 11;
const BINS: usize = 32;
const ROWS: usize = BINS * BINS * BINS;

#[derive(Debug, Clone)]
pub struct ColorNameTable {
    bins_per_channel: usize,
    rows: Vec<[f64; COLOR_TERMS]>,
}

impl ColorNameTable {
    pub fn bins_per_channel(&self) -> usize {
        self.bins_per_channel
    }

    /// Probability row for a full-range RGB pixel; bins are `floor(c / 8)`.
    #[inline]
    pub fn lookup(&self, r: u8, g: u8, b: u8) -> &[f64; COLOR_TERMS] {
        let (rb, gb, bb) = (r as usize / 8, g as usize / 8, b as usize / 8);
        &self.rows[(rb * BINS + gb) * BINS + bb]
    }

    fn from_rows(mut rows: Vec<[f64; COLOR_TERMS]>) -> Result<Self> {
        if rows.len() != ROWS {
            return Err(Error::BadColorTable(format!(
                "expected {ROWS} rows, got {}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter_mut().enumerate() {
            let mut sum = 0.0;
            for &p in row.iter() {
                if p < 0.0 {
                    return Err(Error::BadColorTable(format!(
                        "row {i}: negative probability {p}"
                    )));
                }
                sum += p;
            }
            if !(0.9..=1.1).contains(&sum) {
                return Err(Error::BadColorTable(format!(
                    "row {i}: probabilities sum to {sum}, outside [0.9, 1.1]"
                )));
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Ok(Self {
            bins_per_channel: BINS,
            rows,
        })
    }

    /// Parse the standard 32x32x32 text format.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = vec![None::<[f64; COLOR_TERMS]>; ROWS];
        let mut count = 0usize;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 + COLOR_TERMS {
                return Err(Error::BadColorTable(format!(
                    "line {}: expected 14 columns, got {}",
                    ln + 1,
                    fields.len()
                )));
            }
            let parse_bin = |s: &str| -> Result<usize> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::BadColorTable(format!("line {}: bad bin {s}", ln + 1)))?;
                let v = v as i64;
                if !(0..BINS as i64).contains(&v) {
                    return Err(Error::BadColorTable(format!(
                        "line {}: bin {v} out of [0, {BINS})",
                        ln + 1
                    )));
                }
                Ok(v as usize)
            };
            let r = parse_bin(fields[0])?;
            let g = parse_bin(fields[1])?;
            let b = parse_bin(fields[2])?;
            let mut row = [0.0; COLOR_TERMS];
            for (k, f) in fields[3..].iter().enumerate() {
                row[k] = f.parse().map_err(|_| {
                    Error::BadColorTable(format!("line {}: bad probability {f}", ln + 1))
                })?;
            }
            let idx = (r * BINS + g) * BINS + b;
            if rows[idx].replace(row).is_some() {
                return Err(Error::BadColorTable(format!(
                    "line {}: duplicate bin ({r}, {g}, {b})",
                    ln + 1
                )));
            }
            count += 1;
        }
        if count != ROWS {
            return Err(Error::BadColorTable(format!(
                "expected {ROWS} rows, got {count}"
            )));
        }
        Self::from_rows(rows.into_iter().map(|r| r.unwrap()).collect())
    }

    /// Write the table in the same text format `load` accepts.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = String::new();
        for r in 0..BINS {
            for g in 0..BINS {
                for b in 0..BINS {
                    let row = &self.rows[(r * BINS + g) * BINS + b];
                    buf.clear();
                    buf.push_str(&format!("{r} {g} {b}"));
                    for p in row {
                        buf.push_str(&format!(" {p:.6}"));
                    }
                    buf.push('\n');
                    out.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
                }
            }
        }
        Ok(())
    }

    /// A deterministic stand-in table built from RGB anchors for the 11
    /// basic color terms. The real table is learned from web imagery and is
    /// distributed separately; this one keeps the pipeline self-contained
    /// for demos and tests.
    pub fn synthetic() -> Self {
        // black, blue, brown, gray, green, orange, pink, purple, red, white, yellow
        const ANCHORS: [[f64; 3]; COLOR_TERMS] = [
            [0.0, 0.0, 0.0],
            [40.0, 70.0, 220.0],
            [140.0, 90.0, 40.0],
            [128.0, 128.0, 128.0],
            [50.0, 170.0, 60.0],
            [250.0, 150.0, 30.0],
            [250.0, 160.0, 200.0],
            [150.0, 60.0, 200.0],
            [220.0, 40.0, 40.0],
            [255.0, 255.0, 255.0],
            [250.0, 230.0, 40.0],
        ];
        const SIGMA: f64 = 55.0;
        let mut rows = Vec::with_capacity(ROWS);
        for r in 0..BINS {
            for g in 0..BINS {
                for b in 0..BINS {
                    let center = [
                        (r as f64 + 0.5) * 8.0,
                        (g as f64 + 0.5) * 8.0,
                        (b as f64 + 0.5) * 8.0,
                    ];
                    let mut row = [0.0; COLOR_TERMS];
                    let mut sum = 0.0;
                    for (k, a) in ANCHORS.iter().enumerate() {
                        let d2 = (center[0] - a[0]).powi(2)
                            + (center[1] - a[1]).powi(2)
                            + (center[2] - a[2]).powi(2);
                        let w = (-d2 / (2.0 * SIGMA * SIGMA)).exp();
                        row[k] = w;
                        sum += w;
                    }
                    for p in row.iter_mut() {
                        *p /= sum;
                    }
                    rows.push(row);
                }
            }
        }
        Self {
            bins_per_channel: BINS,
            rows,
        }
    }

    /// Test helper: a table where every bin maps one-hot onto
    /// `term = (r_bin + g_bin + b_bin) % 11`.
    pub fn one_hot_checker() -> Self {
        let mut rows = Vec::with_capacity(ROWS);
        for r in 0..BINS {
            for g in 0..BINS {
                for b in 0..BINS {
                    let mut row = [0.0; COLOR_TERMS];
                    row[(r + g + b) % COLOR_TERMS] = 1.0;
                    rows.push(row);
                }
            }
        }
        Self {
            bins_per_channel: BINS,
            rows,
        }
    }
}

//! Line-oriented `key = value` configuration with `[section]` headers.
//! Unknown sections or keys are rejected; `--set section.key=value` flags
//! override file values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use reid_core::eval::{PartTwo, ProtocolConfig, RankingMode};
use reid_core::features::Channel;
use reid_core::imgio::DatasetLayout;
use reid_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    // [dataset]
    pub root: PathBuf,
    pub layout: DatasetLayout,
    pub target_height: usize,
    pub target_width: usize,
    /// `synthetic` or a path to a 32x32x32 color-name table.
    pub color_names: String,
    // [slic]
    pub n_superpixels: usize,
    pub compactness: f64,
    pub foreground_threshold: f64,
    // [features]
    pub n_strips: usize,
    pub channels: Vec<Channel>,
    // [codebook]
    pub codebook_k: usize,
    pub ma: usize,
    pub metric_codebook: bool,
    // [metric]
    pub kissme_epsilon: f64,
    pub negative_ratio: f64,
    pub max_positive_pairs: Option<usize>,
    // [subspace]
    pub part_two: PartTwo,
    // [protocol]
    pub split_kind: SplitKind,
    pub ranking: RankingMode,
    pub n_trials: usize,
    pub max_rank: usize,
    pub multi_query: bool,
    pub train_list: Option<PathBuf>,
    pub test_list: Option<PathBuf>,
    // [output]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    HalfSplit,
    FixedFiles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            layout: DatasetLayout::SyntheticManifest,
            target_height: 128,
            target_width: 48,
            color_names: "synthetic".into(),
            n_superpixels: 500,
            compactness: 20.0,
            foreground_threshold: 0.5,
            n_strips: 16,
            channels: Channel::ALL.to_vec(),
            codebook_k: 350,
            ma: 10,
            metric_codebook: true,
            kissme_epsilon: 1e-3,
            negative_ratio: 1.0,
            max_positive_pairs: Some(200_000),
            part_two: PartTwo::Euclidean,
            split_kind: SplitKind::HalfSplit,
            ranking: RankingMode::CrossCamera,
            n_trials: 10,
            max_rank: 30,
            multi_query: false,
            train_list: None,
            test_list: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("config line {line}: {msg}"))
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| bad(i + 1, "unterminated section header"))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, "expected key = value"))?;
            config
                .apply(&section, key.trim(), value.trim())
                .map_err(|e| bad(i + 1, e))?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply one `section.key = value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{path}` is not section.key")))?;
        self.apply(section, key, value.trim())
            .map_err(|e| Error::Config(format!("override `{spec}`: {e}")))
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key [{section}] {key}"));
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("[{section}] {key}: bad integer `{v}`")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("[{section}] {key}: bad number `{v}`")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("[{section}] {key}: bad bool `{v}`"))),
            }
        };
        let opt_usize = |v: &str| -> Result<Option<usize>> {
            if v.is_empty() || v == "none" {
                Ok(None)
            } else {
                v.parse()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("[{section}] {key}: bad integer `{v}`")))
            }
        };
        match (section, key) {
            ("dataset", "root") => self.root = PathBuf::from(value),
            ("dataset", "layout") => self.layout = value.parse()?,
            ("dataset", "target_height") => self.target_height = parse_usize(value)?,
            ("dataset", "target_width") => self.target_width = parse_usize(value)?,
            ("dataset", "color_names") => self.color_names = value.to_string(),
            ("slic", "n_superpixels") => self.n_superpixels = parse_usize(value)?,
            ("slic", "compactness") => self.compactness = parse_f64(value)?,
            ("slic", "foreground_threshold") => self.foreground_threshold = parse_f64(value)?,
            ("features", "n_strips") => self.n_strips = parse_usize(value)?,
            ("features", "channels") => {
                let mut channels = Vec::new();
                for part in value.split(',') {
                    channels.push(part.trim().parse::<Channel>()?);
                }
                self.channels = channels;
            }
            ("codebook", "k") => self.codebook_k = parse_usize(value)?,
            ("codebook", "ma") => self.ma = parse_usize(value)?,
            ("codebook", "metric") => {
                self.metric_codebook = match value {
                    "kissme" => true,
                    "euclidean" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "[codebook] metric must be kissme or euclidean, got `{value}`"
                        )))
                    }
                }
            }
            ("metric", "epsilon") => self.kissme_epsilon = parse_f64(value)?,
            ("metric", "negative_ratio") => self.negative_ratio = parse_f64(value)?,
            ("metric", "max_positive_pairs") => self.max_positive_pairs = opt_usize(value)?,
            ("subspace", "part_two") => {
                self.part_two = match value {
                    "euclidean" => PartTwo::Euclidean,
                    "kissme" => PartTwo::Kissme { pca_dim: None },
                    "xqda" => PartTwo::Xqda { target_dim: None },
                    "nfst" => PartTwo::Nfst,
                    _ => {
                        return Err(Error::Config(format!(
                            "[subspace] part_two must be euclidean|kissme|xqda|nfst, got `{value}`"
                        )))
                    }
                }
            }
            ("subspace", "pca_dim") => {
                let dim = opt_usize(value)?;
                if let PartTwo::Kissme { pca_dim } = &mut self.part_two {
                    *pca_dim = dim;
                } else if dim.is_some() {
                    return Err(Error::Config(
                        "[subspace] pca_dim only applies to part_two = kissme".into(),
                    ));
                }
            }
            ("subspace", "target_dim") => {
                let dim = opt_usize(value)?;
                if let PartTwo::Xqda { target_dim } = &mut self.part_two {
                    *target_dim = dim;
                } else if dim.is_some() {
                    return Err(Error::Config(
                        "[subspace] target_dim only applies to part_two = xqda".into(),
                    ));
                }
            }
            ("protocol", "kind") => {
                self.split_kind = match value {
                    "half_split" => SplitKind::HalfSplit,
                    "fixed_files" => SplitKind::FixedFiles,
                    _ => {
                        return Err(Error::Config(format!(
                            "[protocol] kind must be half_split or fixed_files, got `{value}`"
                        )))
                    }
                }
            }
            ("protocol", "ranking") => {
                self.ranking = match value {
                    "cross_camera" => RankingMode::CrossCamera,
                    "full_gallery" => RankingMode::FullGallery,
                    _ => {
                        return Err(Error::Config(format!(
                            "[protocol] ranking must be cross_camera or full_gallery, got `{value}`"
                        )))
                    }
                }
            }
            ("protocol", "n_trials") => self.n_trials = parse_usize(value)?,
            ("protocol", "max_rank") => self.max_rank = parse_usize(value)?,
            ("protocol", "multi_query") => self.multi_query = parse_bool(value)?,
            ("protocol", "train_list") => {
                self.train_list = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            ("protocol", "test_list") => {
                self.test_list = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            ("output", "dir") => self.out_dir = PathBuf::from(value),
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(
            (16..=1024).contains(&self.target_height) && (8..=1024).contains(&self.target_width),
            "target size out of range (height 16..=1024, width 8..=1024)",
        )?;
        check(
            (1..=20_000).contains(&self.n_superpixels),
            "n_superpixels out of range 1..=20000",
        )?;
        check(self.compactness > 0.0, "compactness must be positive")?;
        check(
            (0.0..=1.0).contains(&self.foreground_threshold),
            "foreground_threshold outside [0, 1]",
        )?;
        check(
            (1..=64).contains(&self.n_strips),
            "n_strips out of range 1..=64",
        )?;
        check(!self.channels.is_empty(), "at least one channel required")?;
        check(
            (1..=4096).contains(&self.codebook_k),
            "codebook k out of range 1..=4096",
        )?;
        check(
            self.ma >= 1 && self.ma <= self.codebook_k,
            "ma out of range 1..=k",
        )?;
        check(self.kissme_epsilon >= 0.0, "epsilon must be nonnegative")?;
        check(
            self.negative_ratio >= 0.0,
            "negative_ratio must be nonnegative",
        )?;
        check(
            (1..=1000).contains(&self.n_trials),
            "n_trials out of range 1..=1000",
        )?;
        check(
            (1..=1000).contains(&self.max_rank),
            "max_rank out of range 1..=1000",
        )?;
        if self.split_kind == SplitKind::FixedFiles {
            check(
                self.train_list.is_some() && self.test_list.is_some(),
                "fixed_files protocol needs train_list and test_list",
            )?;
        }
        Ok(())
    }

    /// Canonical text form: every field in a fixed order, used for hashing.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let channels: Vec<&str> = self.channels.iter().map(|c| c.name()).collect();
        let _ = write!(
            s,
            "root={};layout={:?};th={};tw={};cn={};nsp={};comp={};fg={};strips={};channels={};\
             k={};ma={};metric={};eps={};negr={};maxpos={:?};part_two={:?};kind={:?};ranking={:?};\
             trials={};max_rank={};mq={};train_list={:?};test_list={:?}",
            self.root.display(),
            self.layout,
            self.target_height,
            self.target_width,
            self.color_names,
            self.n_superpixels,
            self.compactness,
            self.foreground_threshold,
            self.n_strips,
            channels.join(","),
            self.codebook_k,
            self.ma,
            self.metric_codebook,
            self.kissme_epsilon,
            self.negative_ratio,
            self.max_positive_pairs,
            self.part_two,
            self.split_kind,
            self.ranking,
            self.n_trials,
            self.max_rank,
            self.multi_query,
            self.train_list,
            self.test_list,
        );
        s
    }

    /// FNV-1a 64 hash of the canonical form, as fixed-width hex.
    pub fn config_hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_string().as_bytes()))
    }

    /// Hash of only the fields that influence extraction outputs.
    pub fn extract_hash(&self, input_fingerprint: &str) -> String {
        let channels: Vec<&str> = self.channels.iter().map(|c| c.name()).collect();
        let subset = format!(
            "root={};layout={:?};th={};tw={};cn={};nsp={};comp={};fg={};strips={};channels={};in={}",
            self.root.display(),
            self.layout,
            self.target_height,
            self.target_width,
            self.color_names,
            self.n_superpixels,
            self.compactness,
            self.foreground_threshold,
            self.n_strips,
            channels.join(","),
            input_fingerprint,
        );
        format!("{:016x}", fnv1a64(subset.as_bytes()))
    }

    pub fn protocol_config(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            n_superpixels: self.n_superpixels,
            compactness: self.compactness,
            foreground_threshold: self.foreground_threshold,
            n_strips: self.n_strips,
            codebook_k: self.codebook_k,
            ma: self.ma,
            kissme_epsilon: self.kissme_epsilon,
            negative_ratio: self.negative_ratio,
            max_positive_pairs: self.max_positive_pairs,
            metric_codebook: self.metric_codebook,
            part_two: self.part_two.clone(),
            kmeans_max_iters: 100,
            kmeans_tol: 1e-4,
            seed,
            max_rank: self.max_rank,
            ranking: self.ranking,
            multi_query: self.multi_query,
            channels: self.channels.clone(),
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable fingerprint of the dataset inputs: sorted file names and sizes.
pub fn input_fingerprint(root: &Path) -> Result<String> {
    let mut entries: BTreeMap<String, u64> = BTreeMap::new();
    if root.is_dir() {
        collect_files(root, root, &mut entries)?;
    }
    let mut s = String::new();
    for (name, size) in entries {
        let _ = write!(s, "{name}:{size};");
    }
    Ok(format!("{:016x}", fnv1a64(s.as_bytes())))
}

fn collect_files(base: &Path, dir: &Path, out: &mut BTreeMap<String, u64>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(base, &path, out)?;
        } else if let Ok(meta) = entry.metadata() {
            let rel = path
                .strip_prefix(base)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            out.insert(rel, meta.len());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_hash_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "[dataset]\nroot = data\nlayout = synthetic_manifest\ntarget_height = 64\n\
             target_width = 24\n\n[slic]\nn_superpixels = 120  # comment\n\n[codebook]\nk = 32\n\
             metric = euclidean\n\n[protocol]\nn_trials = 2\n",
        )
        .unwrap();
        let config = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(config.target_height, 64);
        assert_eq!(config.n_superpixels, 120);
        assert_eq!(config.codebook_k, 32);
        assert!(!config.metric_codebook);
        assert_eq!(config.n_trials, 2);
        let h1 = config.config_hash();
        let mut other = config.clone();
        other.codebook_k = 33;
        assert_ne!(h1, other.config_hash());
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "[slic]\nbogus_key = 3\n").unwrap();
        assert!(PipelineConfig::from_file(&path).is_err());
    }

    #[test]
    fn out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "[codebook]\nk = 0\n").unwrap();
        assert!(PipelineConfig::from_file(&path).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut config = PipelineConfig::default();
        config.apply_override("codebook.k=64").unwrap();
        assert_eq!(config.codebook_k, 64);
        assert!(config.apply_override("nonsense").is_err());
        assert!(config.apply_override("slic.bogus=1").is_err());
    }
}

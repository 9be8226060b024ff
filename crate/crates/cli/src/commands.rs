//! The five pipeline commands: extract, train, eval, synth, plot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reid_core::codebook::Codebook;
use reid_core::descriptor::ImageDescriptor;
use reid_core::eval::{
    build_all_descriptors, cmc, mean_ap, rank_test_set, train_codebooks, train_part_two,
    write_cmc_csv, write_cmc_svg, write_report_json, DescriptorScorer, EvalReport, ExtractedImage,
    TrialReport,
};
use reid_core::features::{read_feature_dump, write_feature_dump, Channel, LocalFeature};
use reid_core::imgio::{
    load_dataset, make_splits_labeled, write_synthetic_dataset, CameraShift, ColorNameTable,
    SplitPlan, SplitProtocol, SynthConfig, DISTRACTOR_ID, JUNK_ID,
};
use reid_core::{Error, Result};

use crate::config::{input_fingerprint, PipelineConfig};

pub const CACHE_DIR_ENV: &str = "REID_CACHE_DIR";

pub fn cache_dir(config: &PipelineConfig) -> PathBuf {
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config.out_dir.join("cache"),
    }
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    id: String,
    camera: u32,
    n_features: usize,
}

#[derive(Serialize, Deserialize)]
struct ExtractMeta {
    extract_hash: String,
    config_hash: String,
    images: Vec<ImageEntry>,
}

#[derive(Serialize, Deserialize)]
struct TrialMeta {
    config_hash: String,
    seed: u64,
    trial: usize,
    train_ids: Vec<String>,
    test_ids: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).unwrap())
        .map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::BadFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_color_table(config: &PipelineConfig) -> Result<ColorNameTable> {
    if config.color_names == "synthetic" {
        Ok(ColorNameTable::synthetic())
    } else {
        ColorNameTable::load(Path::new(&config.color_names))
    }
}

fn feature_dump_path(cache: &Path, channel: Channel) -> PathBuf {
    cache.join(format!("features_{}.feat", channel.name()))
}

/// Load dataset, segment, extract features, and write per-channel dumps.
/// Skipped when the cache already holds dumps for the same inputs, unless
/// `force` is set. `dump_labels` additionally writes each image's superpixel
/// label map as a 16-bit grayscale PNG for inspection.
pub fn cmd_extract(config: &PipelineConfig, force: bool, dump_labels: bool) -> Result<()> {
    let cache = cache_dir(config);
    fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
    let fingerprint = input_fingerprint(&config.root)?;
    let extract_hash = config.extract_hash(&fingerprint);
    let meta_path = cache.join("extract.json");

    if !force && !dump_labels && meta_path.exists() {
        if let Ok(meta) = read_json::<ExtractMeta>(&meta_path) {
            if meta.extract_hash == extract_hash {
                println!(
                    "extract: cache hit ({} images, hash {extract_hash}); use --force to redo",
                    meta.images.len()
                );
                return Ok(());
            }
        }
    }

    let images = load_dataset(
        &config.root,
        config.layout,
        (config.target_height, config.target_width),
    )?;
    let table = load_color_table(config)?;
    let proto = config.protocol_config(0);

    if dump_labels {
        let label_dir = cache.join("labels");
        fs::create_dir_all(&label_dir).map_err(|e| Error::io(&label_dir, e))?;
        for (i, img) in images.iter().enumerate() {
            let seg = reid_core::slic::segment(img, config.n_superpixels, config.compactness)?;
            seg.save_label_png(
                &label_dir.join(format!("{}_cam{}_{:03}.png", img.id, img.camera, i)),
            )?;
        }
    }

    let extracted = reid_core::eval::extract_all(&images, &table, &proto)?;

    let mut entries = Vec::with_capacity(extracted.len());
    let mut per_channel: BTreeMap<Channel, Vec<LocalFeature>> = BTreeMap::new();
    let lead = config.channels[0];
    for img in &extracted {
        // every channel yields one vector per foreground superpixel, so any
        // single channel's count is the per-image row count of each dump
        let per_image = img.features.iter().filter(|f| f.channel == lead).count();
        entries.push(ImageEntry {
            id: img.id.clone(),
            camera: img.camera,
            n_features: per_image,
        });
        for f in &img.features {
            per_channel.entry(f.channel).or_default().push(f.clone());
        }
    }
    for &channel in &config.channels {
        let feats = per_channel.remove(&channel).unwrap_or_default();
        write_feature_dump(&feature_dump_path(&cache, channel), channel, &feats)?;
    }
    write_json(
        &meta_path,
        &ExtractMeta {
            extract_hash,
            config_hash: config.config_hash(),
            images: entries,
        },
    )?;
    println!(
        "extract: wrote {} images x {} channels to {}",
        extracted.len(),
        config.channels.len(),
        cache.display()
    );
    Ok(())
}

/// Rebuild the per-image feature groups from the cache.
fn load_extracted(config: &PipelineConfig) -> Result<(ExtractMeta, Vec<ExtractedImage>)> {
    let cache = cache_dir(config);
    let meta_path = cache.join("extract.json");
    if !meta_path.exists() {
        return Err(Error::MissingDirectory(cache));
    }
    let meta: ExtractMeta = read_json(&meta_path)?;
    let fingerprint = input_fingerprint(&config.root)?;
    if meta.extract_hash != config.extract_hash(&fingerprint) {
        return Err(Error::Config(
            "feature cache was built with a different configuration or inputs; rerun extract"
                .into(),
        ));
    }

    let mut images: Vec<ExtractedImage> = meta
        .images
        .iter()
        .map(|e| ExtractedImage {
            id: e.id.clone(),
            camera: e.camera,
            features: Vec::new(),
        })
        .collect();
    for &channel in &config.channels {
        let (got, feats) = read_feature_dump(&feature_dump_path(&cache, channel))?;
        if got != channel {
            return Err(Error::Config(format!(
                "feature dump channel mismatch: wanted {}, got {}",
                channel.name(),
                got.name()
            )));
        }
        let mut cursor = 0usize;
        for (img, entry) in images.iter_mut().zip(meta.images.iter()) {
            let end = cursor + entry.n_features;
            if end > feats.len() {
                return Err(Error::BadFormat {
                    path: feature_dump_path(&cache, channel),
                    reason: "dump shorter than the extraction manifest".into(),
                });
            }
            img.features.extend_from_slice(&feats[cursor..end]);
            cursor = end;
        }
        if cursor != feats.len() {
            return Err(Error::BadFormat {
                path: feature_dump_path(&cache, channel),
                reason: "dump longer than the extraction manifest".into(),
            });
        }
    }
    Ok((meta, images))
}

fn split_plans(config: &PipelineConfig, meta: &ExtractMeta, seed: u64) -> Result<Vec<SplitPlan>> {
    let labels: Vec<(String, u32)> = meta
        .images
        .iter()
        .map(|e| (e.id.clone(), e.camera))
        .collect();
    let protocol = match config.split_kind {
        crate::config::SplitKind::HalfSplit => SplitProtocol::HalfSplit,
        crate::config::SplitKind::FixedFiles => SplitProtocol::FixedFiles {
            train: config.train_list.clone().unwrap(),
            test: config.test_list.clone().unwrap(),
        },
    };
    let n_trials = match config.split_kind {
        crate::config::SplitKind::HalfSplit => config.n_trials,
        crate::config::SplitKind::FixedFiles => 1,
    };
    make_splits_labeled(&labels, &protocol, n_trials, seed)
}

fn trial_dir(config: &PipelineConfig, trial: usize) -> PathBuf {
    config.out_dir.join("models").join(format!("trial_{trial:03}"))
}

/// Train per-trial models: channel metrics, codebooks and the part-two
/// scorer, persisted with the config hash.
pub fn cmd_train(config: &PipelineConfig, seed: u64) -> Result<()> {
    let (meta, extracted) = load_extracted(config)?;
    let plans = split_plans(config, &meta, seed)?;
    let config_hash = config.config_hash();
    let proto = config.protocol_config(seed);

    for (t, plan) in plans.iter().enumerate() {
        let dir = trial_dir(config, t);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let trial_seed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(plan.trial_seed);
        let tag = format!("{config_hash}:seed={seed}:trial={t}");

        let books = train_codebooks(&extracted, &plan.train_ids, &proto, trial_seed)?;
        for (&channel, book) in &books {
            book.metric()
                .save(&dir.join(format!("metric_{}.bin", channel.name())), &tag)?;
            book.save(&dir.join(format!("codebook_{}.bin", channel.name())), &tag)?;
        }

        let descriptors = build_all_descriptors(&extracted, &books, &proto)?;
        let train: Vec<&ImageDescriptor> = descriptors
            .iter()
            .filter(|d| plan.train_ids.binary_search(&d.image_id).is_ok())
            .collect();
        let scorer = train_part_two(&train, &proto, trial_seed)?;
        scorer.save(&dir.join("part_two.bin"), &tag)?;

        write_json(
            &dir.join("meta.json"),
            &TrialMeta {
                config_hash: config_hash.clone(),
                seed,
                trial: t,
                train_ids: plan.train_ids.clone(),
                test_ids: plan.test_ids.clone(),
            },
        )?;
        println!(
            "train: trial {t}: {} train ids, {} channels, part-two {:?} -> {}",
            plan.train_ids.len(),
            books.len(),
            config.part_two,
            dir.display()
        );
    }
    Ok(())
}

/// Evaluate persisted models: build descriptors, rank test probes, write
/// CSV/JSON (and SVG) reports. Refuses artifacts whose config hash differs.
pub fn cmd_eval(config: &PipelineConfig, svg: bool, dump_descriptors: bool) -> Result<()> {
    let (_meta, extracted) = load_extracted(config)?;
    let config_hash = config.config_hash();
    let models_root = config.out_dir.join("models");
    if !models_root.is_dir() {
        return Err(Error::MissingDirectory(models_root));
    }
    let mut trial_dirs: Vec<PathBuf> = fs::read_dir(&models_root)
        .map_err(|e| Error::io(&models_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    trial_dirs.sort();
    if trial_dirs.is_empty() {
        return Err(Error::Config("no trained trials found; run train first".into()));
    }

    let mut per_trial = Vec::new();
    let proto = config.protocol_config(0);
    for dir in &trial_dirs {
        let meta: TrialMeta = read_json(&dir.join("meta.json"))?;
        if meta.config_hash != config_hash {
            return Err(Error::Config(format!(
                "model {} was trained with config hash {}, current is {config_hash}",
                dir.display(),
                meta.config_hash
            )));
        }
        let mut books = BTreeMap::new();
        for &channel in &config.channels {
            let (book, _tag) =
                Codebook::load(&dir.join(format!("codebook_{}.bin", channel.name())))?;
            books.insert(channel, book);
        }
        let (scorer, _tag) = DescriptorScorer::load(&dir.join("part_two.bin"))?;

        let descriptors = build_all_descriptors(&extracted, &books, &proto)?;
        if dump_descriptors {
            reid_core::descriptor::write_descriptor_matrix(
                &dir.join("descriptors.bin"),
                &descriptors,
            )?;
        }
        let test: Vec<&ImageDescriptor> = descriptors
            .iter()
            .filter(|d| {
                meta.test_ids.binary_search(&d.image_id).is_ok()
                    || d.image_id == DISTRACTOR_ID
                    || d.image_id == JUNK_ID
            })
            .collect();
        if test.is_empty() {
            return Err(Error::BadSplit("trial has no test descriptors".into()));
        }
        let ranked = rank_test_set(&scorer, &test, &proto)?;
        per_trial.push(TrialReport {
            cmc: cmc(&ranked, config.max_rank)?,
            map: mean_ap(&ranked)?,
            n_queries: ranked.len(),
        });
    }

    let n = per_trial.len() as f64;
    let mut mean_cmc = vec![0.0f64; config.max_rank];
    let mut map = 0.0;
    for t in &per_trial {
        for (m, &v) in mean_cmc.iter_mut().zip(t.cmc.iter()) {
            *m += v / n;
        }
        map += t.map / n;
    }
    let report = EvalReport {
        protocol: format!("{:?}", config.ranking),
        max_rank: config.max_rank,
        cmc: mean_cmc,
        map,
        per_trial,
    };

    let reports = config.out_dir.join("reports");
    fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    write_report_json(&reports.join("report.json"), &report, &config_hash)?;
    write_cmc_csv(&reports.join("cmc_mean.csv"), &report.cmc)?;
    for (t, trial) in report.per_trial.iter().enumerate() {
        write_cmc_csv(&reports.join(format!("cmc_trial_{t:03}.csv")), &trial.cmc)?;
    }
    if svg {
        write_cmc_svg(
            &reports.join("cmc.svg"),
            &[("mean".to_string(), report.cmc.clone())],
        )?;
    }
    println!(
        "eval: {} trials, rank-1 {:.2}%, mAP {:.2}% -> {}",
        report.per_trial.len(),
        report.rank(1) * 100.0,
        report.map * 100.0,
        reports.display()
    );
    Ok(())
}

/// Generate a synthetic two-camera dataset (and optionally a synthetic
/// color-name table).
#[allow(clippy::too_many_arguments)]
pub fn cmd_synth(
    out: &Path,
    n_ids: usize,
    per_camera: usize,
    height: usize,
    width: usize,
    hue: f64,
    gamma: f64,
    noise: f64,
    seed: u64,
    color_table: Option<&Path>,
) -> Result<()> {
    let cfg = SynthConfig {
        n_ids,
        per_camera,
        height,
        width,
        shift: CameraShift {
            hue_rotation: hue,
            gamma,
            noise_sigma: noise,
        },
        seed,
    };
    let n = write_synthetic_dataset(&cfg, out)?;
    println!("synth: wrote {n} images to {}", out.display());
    if let Some(path) = color_table {
        ColorNameTable::synthetic().save(path)?;
        println!("synth: wrote color-name table to {}", path.display());
    }
    Ok(())
}

/// Merge CMC CSV files into one SVG.
pub fn cmd_plot(out: &Path, inputs: &[PathBuf], labels: Option<&str>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("plot needs at least one CSV input".into()));
    }
    let label_list: Vec<String> = match labels {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).collect(),
        None => inputs
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "curve".into())
            })
            .collect(),
    };
    if label_list.len() != inputs.len() {
        return Err(Error::Config(format!(
            "{} labels for {} inputs",
            label_list.len(),
            inputs.len()
        )));
    }
    let mut curves = Vec::new();
    for (path, label) in inputs.iter().zip(label_list) {
        curves.push((label, reid_core::eval::read_cmc_csv(path)?));
    }
    write_cmc_svg(out, &curves)?;
    println!("plot: wrote {}", out.display());
    Ok(())
}

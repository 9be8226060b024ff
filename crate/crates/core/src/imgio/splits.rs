//! Train/test identity splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::PedestrianImage;

/// One train/test partition of the dataset identities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub trial_seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub n_trials: usize,
}

/// How splits are generated.
#[derive(Debug, Clone)]
pub enum SplitProtocol {
    /// Each trial independently samples half the identities for training.
    HalfSplit,
    /// A single plan read from identity list files.
    FixedFiles { train: PathBuf, test: PathBuf },
}

/// Read one identity per line, UTF-8, blank lines skipped.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

pub fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Build `n_trials` split plans. Half splits sample `floor(n_ids / 2)`
/// identities for training per trial, deterministically from `seed`.
pub fn make_splits(
    images: &[PedestrianImage],
    protocol: &SplitProtocol,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    let labels: Vec<(String, u32)> = images
        .iter()
        .map(|i| (i.id.clone(), i.camera))
        .collect();
    make_splits_labeled(&labels, protocol, n_trials, seed)
}

/// [`make_splits`] from (identity, camera) labels alone, for callers that
/// hold feature dumps rather than decoded images.
pub fn make_splits_labeled(
    labels: &[(String, u32)],
    protocol: &SplitProtocol,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    if n_trials < 1 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    let mut ids: Vec<String> = labels
        .iter()
        .map(|(id, _)| id.clone())
        .filter(|id| id != crate::imgio::DISTRACTOR_ID && id != crate::imgio::JUNK_ID)
        .collect();
    ids.sort();
    ids.dedup();

    match protocol {
        SplitProtocol::HalfSplit => {
            if ids.len() < 2 {
                return Err(Error::BadSplit(format!(
                    "half split needs at least 2 identities, got {}",
                    ids.len()
                )));
            }
            // every identity needs at least one image per camera
            let mut cams_per_id: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
            let mut all_cams: Vec<u32> = Vec::new();
            for (id, camera) in labels {
                if id == crate::imgio::DISTRACTOR_ID || id == crate::imgio::JUNK_ID {
                    continue;
                }
                cams_per_id.entry(id).or_default().push(*camera);
                all_cams.push(*camera);
            }
            all_cams.sort();
            all_cams.dedup();
            for (id, cams) in &cams_per_id {
                for cam in &all_cams {
                    if !cams.contains(cam) {
                        return Err(Error::BadSplit(format!(
                            "identity {id} has no image in camera {cam}"
                        )));
                    }
                }
            }

            let mut plans = Vec::with_capacity(n_trials);
            for trial in 0..n_trials {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(trial as u64 + 1);
                let mut shuffled = ids.clone();
                shuffled.shuffle(&mut rng);
                let n_train = ids.len() / 2;
                let mut train_ids: Vec<String> = shuffled[..n_train].to_vec();
                let mut test_ids: Vec<String> = shuffled[n_train..].to_vec();
                train_ids.sort();
                test_ids.sort();
                plans.push(SplitPlan {
                    trial_seed: seed ^ (trial as u64 + 1),
                    train_ids,
                    test_ids,
                    n_trials,
                });
            }
            Ok(plans)
        }
        SplitProtocol::FixedFiles { train, test } => {
            let train_ids = read_id_list(train)?;
            let test_ids = read_id_list(test)?;
            for id in train_ids.iter().chain(test_ids.iter()) {
                if !ids.contains(id) {
                    return Err(Error::BadSplit(format!(
                        "split file references unknown identity {id}"
                    )));
                }
            }
            for id in &train_ids {
                if test_ids.contains(id) {
                    return Err(Error::Leakage(id.clone()));
                }
            }
            let mut train_ids = train_ids;
            let mut test_ids = test_ids;
            train_ids.sort();
            test_ids.sort();
            Ok(vec![SplitPlan {
                trial_seed: seed,
                train_ids,
                test_ids,
                n_trials: 1,
            }])
        }
    }
}

//! Dataset catalogs, stratified splits and feature tables.
//!
//! A dataset root holds one directory per class, each containing one `.npy`
//! file per sample: `<root>/<class_name>/<sample>.npy`. Sample paths are
//! stored relative to the root with `/` separators.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, HandKeypoints};
use crate::npy;
use crate::rng;

/// The feature layout fed to an encoder or to the input-space baseline.
///
/// `RawUnnormalized` is the 63-D flattening of the landmarks without wrist
/// centring or scale normalisation; it exists for the normalisation
/// ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Raw,
    Angle,
    RawAngle,
    RawUnnormalized,
}

impl Representation {
    pub const ALL: [Representation; 4] = [
        Representation::Raw,
        Representation::Angle,
        Representation::RawAngle,
        Representation::RawUnnormalized,
    ];

    pub fn dim(self) -> usize {
        match self {
            Representation::Raw | Representation::RawUnnormalized => geometry::RAW_DIM,
            Representation::Angle => geometry::ANGLE_DIM,
            Representation::RawAngle => geometry::RAW_ANGLE_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Representation::Raw => "raw",
            Representation::Angle => "angle",
            Representation::RawAngle => "raw_angle",
            Representation::RawUnnormalized => "raw_unnormalized",
        }
    }

    pub fn extract(self, h: &HandKeypoints) -> Result<Vec<f64>> {
        Ok(match self {
            Representation::Raw => geometry::raw_features(h)?.values,
            Representation::Angle => geometry::joint_angles(h).values,
            Representation::RawAngle => geometry::raw_angle_features(h)?.values,
            Representation::RawUnnormalized => h.flatten(),
        })
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Representation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown representation '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub path: String,
    pub class_id: usize,
    pub keypoints: HandKeypoints,
}

#[derive(Debug, Clone)]
pub struct DatasetCatalog {
    pub name: String,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    /// Files that failed to decode and were left out.
    pub skipped: usize,
}

impl DatasetCatalog {
    pub fn from_samples(name: impl Into<String>, classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let catalog = Self {
            name: name.into(),
            classes,
            samples,
            skipped: 0,
        };
        for s in &catalog.samples {
            if s.class_id >= catalog.classes.len() {
                return Err(Error::Config(format!(
                    "sample {} has class id {} but only {} classes exist",
                    s.path,
                    s.class_id,
                    catalog.classes.len()
                )));
            }
        }
        if let Some((c, _)) = catalog.class_counts().iter().enumerate().find(|(_, &n)| n == 0) {
            return Err(Error::Config(format!("class '{}' has no samples", catalog.classes[c])));
        }
        Ok(catalog)
    }

    /// Scans `<root>/<class>/*.npy`. Classes and files are taken in byte-wise
    /// name order. Undecodable files are skipped and counted; classes left
    /// without samples are dropped with a warning.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut class_dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|entry| entry.ok())
            .filter(|entry| entry.path().is_dir())
            .filter_map(|entry| {
                let name = entry.file_name().to_str()?.to_owned();
                Some((name, entry.path()))
            })
            .collect();
        class_dirs.sort();

        let mut files: Vec<(String, String, PathBuf)> = Vec::new();
        for (class_name, dir) in &class_dirs {
            let mut names: Vec<String> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|entry| entry.ok())
                .filter_map(|entry| entry.file_name().to_str().map(str::to_owned))
                .filter(|name| name.ends_with(".npy"))
                .collect();
            names.sort();
            for name in names {
                let path = dir.join(&name);
                files.push((class_name.clone(), format!("{class_name}/{name}"), path));
            }
        }

        let decoded: Vec<Option<HandKeypoints>> = files
            .par_iter()
            .map(|(_, _, path)| match npy::load_keypoints(path) {
                Ok(h) => Some(h),
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    None
                }
            })
            .collect();

        let mut per_class: BTreeMap<&str, Vec<(String, HandKeypoints)>> = BTreeMap::new();
        for (class_name, _) in &class_dirs {
            per_class.entry(class_name.as_str()).or_default();
        }
        let mut skipped = 0;
        for ((class_name, rel, _), h) in files.iter().zip(decoded) {
            match h {
                Some(h) => per_class.get_mut(class_name.as_str()).unwrap().push((rel.clone(), h)),
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            warn!("{skipped} undecodable files skipped under {}", root.display());
        }

        let mut classes = Vec::new();
        let mut samples = Vec::new();
        for (class_name, members) in per_class {
            if members.is_empty() {
                warn!("class directory '{class_name}' has no usable samples; excluded");
                continue;
            }
            let class_id = classes.len();
            classes.push(class_name.to_owned());
            samples.extend(members.into_iter().map(|(path, keypoints)| Sample {
                path,
                class_id,
                keypoints,
            }));
        }

        let name = root
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("dataset")
            .to_owned();
        Ok(Self {
            name,
            classes,
            samples,
            skipped,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.class_id] += 1;
        }
        counts
    }

    pub fn index_by_path(&self) -> BTreeMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.path.as_str(), i))
            .collect()
    }
}

/// Train/test membership, serialised as
/// `{"seed": int, "fraction": real, "train": [paths], "test": [paths]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub seed: u64,
    pub fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSide {
    Train,
    Test,
}

/// Per class, the class's samples (catalog order) are shuffled with
/// `rng::seeded(seed, SPLIT_BASE + class_id)` and the first
/// `round_ties_even(fraction * n)` go to train, clamped to `1..=n-1` when
/// `n >= 2`. A single-sample class goes entirely to train. Both path lists
/// are sorted.
pub fn stratified_split(catalog: &DatasetCatalog, train_fraction: f64, seed: u64) -> Result<SplitFile> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); catalog.classes.len()];
    for s in &catalog.samples {
        by_class[s.class_id].push(&s.path);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class_id, mut members) in by_class.into_iter().enumerate() {
        let n = members.len();
        let mut rng = rng::seeded(seed, rng::stream::SPLIT_BASE + class_id as u64);
        rng::shuffle(&mut rng, &mut members);
        let n_train = train_count(n, train_fraction);
        if n == 1 {
            warn!(
                "class '{}' has a single sample; assigned to train",
                catalog.classes[class_id]
            );
        }
        train.extend(members[..n_train].iter().map(|p| p.to_string()));
        test.extend(members[n_train..].iter().map(|p| p.to_string()));
    }
    train.sort();
    test.sort();
    Ok(SplitFile {
        seed,
        fraction: train_fraction,
        train,
        test,
    })
}

pub fn train_count(n: usize, fraction: f64) -> usize {
    match n {
        0 => 0,
        1 => 1,
        _ => ((fraction * n as f64).round_ties_even() as usize).clamp(1, n - 1),
    }
}

impl SplitFile {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a split and checks it against `catalog`.
    pub fn load(path: impl AsRef<Path>, catalog: &DatasetCatalog) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: SplitFile = serde_json::from_str(&text)?;
        split.validate(catalog)?;
        Ok(split)
    }

    /// Zero train/test overlap, no duplicates, no unknown paths, and the
    /// union is exactly the catalog.
    pub fn validate(&self, catalog: &DatasetCatalog) -> Result<()> {
        let train: HashSet<&str> = self.train.iter().map(String::as_str).collect();
        let test: HashSet<&str> = self.test.iter().map(String::as_str).collect();
        if train.len() != self.train.len() || test.len() != self.test.len() {
            return Err(Error::InvalidSplit("duplicate path within one side".into()));
        }
        if let Some(p) = train.intersection(&test).next() {
            return Err(Error::InvalidSplit(format!("'{p}' is in both train and test")));
        }
        let known = catalog.index_by_path();
        if let Some(p) = train.iter().chain(test.iter()).find(|p| !known.contains_key(*p)) {
            return Err(Error::InvalidSplit(format!("'{p}' is not in the catalog")));
        }
        if train.len() + test.len() != catalog.samples.len() {
            let missing = catalog
                .samples
                .iter()
                .find(|s| !train.contains(s.path.as_str()) && !test.contains(s.path.as_str()))
                .map(|s| s.path.clone())
                .unwrap_or_default();
            return Err(Error::InvalidSplit(format!(
                "split does not cover the catalog (e.g. '{missing}')"
            )));
        }
        Ok(())
    }

    pub fn side(&self, side: SplitSide) -> &[String] {
        match side {
            SplitSide::Train => &self.train,
            SplitSide::Test => &self.test,
        }
    }
}

/// Feature rows for one split side in one representation.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub representation: Representation,
    pub features: Array2<f64>,
    pub class_ids: Vec<usize>,
    pub paths: Vec<String>,
    pub class_names: Vec<String>,
}

impl FeatureTable {
    /// Extracts features for `paths` (in that order). Samples whose features
    /// cannot be computed (e.g. a hand collapsed to a point for `raw`) are
    /// skipped with a warning.
    pub fn build(catalog: &DatasetCatalog, paths: &[String], representation: Representation) -> Result<Self> {
        let index = catalog.index_by_path();
        let rows: Vec<Result<Option<(Vec<f64>, usize, String)>>> = paths
            .par_iter()
            .map(|p| {
                let &i = index
                    .get(p.as_str())
                    .ok_or_else(|| Error::InvalidSplit(format!("'{p}' is not in the catalog")))?;
                let s = &catalog.samples[i];
                match representation.extract(&s.keypoints) {
                    Ok(v) => Ok(Some((v, s.class_id, p.clone()))),
                    Err(e) => {
                        warn!("skipping {p}: {e}");
                        Ok(None)
                    }
                }
            })
            .collect();

        let dim = representation.dim();
        let mut flat = Vec::with_capacity(paths.len() * dim);
        let mut class_ids = Vec::with_capacity(paths.len());
        let mut kept = Vec::with_capacity(paths.len());
        for row in rows {
            if let Some((values, class_id, path)) = row? {
                flat.extend(values);
                class_ids.push(class_id);
                kept.push(path);
            }
        }
        let n = class_ids.len();
        Ok(Self {
            representation,
            features: Array2::from_shape_vec((n, dim), flat).expect("row-major feature buffer"),
            class_ids,
            paths: kept,
            class_names: catalog.classes.clone(),
        })
    }

    pub fn from_split(
        catalog: &DatasetCatalog,
        split: &SplitFile,
        side: SplitSide,
        representation: Representation,
    ) -> Result<Self> {
        Self::build(catalog, split.side(side), representation)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &c in &self.class_ids {
            *counts.entry(c).or_insert(0) += 1;
        }
        counts
    }

    /// Rows grouped by class id, ascending; rows keep table order.
    pub fn pool(&self) -> ClassPool {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &c) in self.class_ids.iter().enumerate() {
            groups.entry(c).or_default().push(row);
        }
        ClassPool {
            classes: groups
                .into_iter()
                .map(|(class_id, rows)| PoolClass { class_id, rows })
                .collect(),
        }
    }

    /// Pool restricted to classes with at least `k + q` rows.
    pub fn eligible_pool(&self, k_shot: usize, q_query: usize) -> ClassPool {
        let eligible = eligible_classes(&self.class_counts(), k_shot, q_query);
        self.pool().restrict(&eligible)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolClass {
    pub class_id: usize,
    pub rows: Vec<usize>,
}

/// Per-class sample lists that episodes are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassPool {
    pub classes: Vec<PoolClass>,
}

impl ClassPool {
    pub fn restrict(&self, class_ids: &[usize]) -> ClassPool {
        let keep: HashSet<usize> = class_ids.iter().copied().collect();
        ClassPool {
            classes: self
                .classes
                .iter()
                .filter(|c| keep.contains(&c.class_id))
                .cloned()
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Classes with at least `k_shot + q_query` samples, ascending by id.
pub fn eligible_classes(counts: &BTreeMap<usize, usize>, k_shot: usize, q_query: usize) -> Vec<usize> {
    counts
        .iter()
        .filter(|(_, &n)| n >= k_shot + q_query)
        .map(|(&c, _)| c)
        .collect()
}

//! File layout of a run directory and loaders that name the producing command
//! when an upstream artifact is missing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use divmotion::data::{load_motion_file, MotionSequence};
use divmotion::skeleton::{Skeleton, SkeletonKind};
use serde::{Deserialize, Serialize};

use crate::manifest::FileRef;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Which sequence files make up each split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub skeleton: SkeletonKind,
    pub seed: u64,
    pub length: usize,
    pub fps: f64,
    /// File paths relative to the data directory.
    pub splits: BTreeMap<String, Vec<FileRef>>,
}

pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.data_dir().join("split.json")
    }

    pub fn prior(&self) -> PathBuf {
        self.root.join("prior.json")
    }

    pub fn prior_log(&self) -> PathBuf {
        self.root.join("prior_log.csv")
    }

    pub fn angles(&self) -> PathBuf {
        self.root.join("angles.toml")
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn samples_dir(&self, name: &str) -> PathBuf {
        self.root.join("samples").join(name)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn load_split_manifest(&self) -> Result<SplitManifest> {
        let path = require(&self.split_manifest(), "synth")?;
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
    }

    /// Every sequence of one split with the skeleton they share.
    pub fn load_split(&self, split: &str) -> Result<(Skeleton, Vec<MotionSequence>, Vec<PathBuf>)> {
        let manifest = self.load_split_manifest()?;
        let Some(files) = manifest.splits.get(split) else {
            bail!(
                "split `{split}` is not listed in {}",
                self.split_manifest().display()
            );
        };
        ensure!(!files.is_empty(), "split `{split}` has no sequences");
        let expected = manifest.skeleton.skeleton();
        let mut seqs = Vec::with_capacity(files.len());
        let mut paths = Vec::with_capacity(files.len());
        for f in files {
            let path = self.data_dir().join(&f.path);
            let (skel, seq) = load_motion_file(require(&path, "synth")?)
                .with_context(|| format!("cannot load {}", path.display()))?;
            ensure!(
                skel.fingerprint() == expected.fingerprint(),
                "{} does not use the {:?} skeleton",
                path.display(),
                manifest.skeleton
            );
            seqs.push(seq);
            paths.push(path);
        }
        Ok((expected, seqs, paths))
    }
}

/// `path` when it exists, otherwise an error naming the command that makes it.
pub fn require(path: &Path, producer: &str) -> Result<PathBuf> {
    if !path.exists() {
        bail!(
            "missing {}; run `divmotion {producer}` first",
            path.display()
        );
    }
    Ok(path.to_path_buf())
}

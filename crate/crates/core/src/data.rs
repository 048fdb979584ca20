//! Dataset adapters: a synthetic Gaussian-mixture set, the bundled 8×8
//! handwritten digits, and headerless CSV files (features..., label).

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable naming the directory relative CSV paths resolve against.
pub const DATA_DIR_ENV: &str = "FOSTER_DATA_DIR";

static DIGITS_GZ: &[u8] = include_bytes!("../data/digits.csv.gz");

/// Instances (one per row) with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn empty(dim: usize) -> Self {
        LabeledSet {
            x: Array2::zeros((0, dim)),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    pub fn concat(&self, other: &LabeledSet) -> LabeledSet {
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        LabeledSet {
            x: ndarray::concatenate(Axis(0), &[self.x.view(), other.x.view()]).expect("equal feature width"),
            y: self.y.iter().chain(&other.y).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, train: LabeledSet, test: LabeledSet) -> Result<Self> {
        if train.dim() != test.dim() {
            return Err(Error::Shape(format!(
                "train has {} features, test has {}",
                train.dim(),
                test.dim()
            )));
        }
        for &y in train.y.iter().chain(&test.y) {
            if y >= num_classes {
                return Err(Error::Label { label: y, num_classes });
            }
        }
        if train.x.iter().chain(test.x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            name: name.into(),
            num_classes,
            train,
            test,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.train.dim()
    }
}

/// Gaussian-mixture classification set: each class is a mixture of
/// `modes_per_class` isotropic Gaussians with randomly placed centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub modes_per_class: usize,
    pub center_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            num_classes: 10,
            dim: 16,
            train_per_class: 200,
            test_per_class: 100,
            modes_per_class: 2,
            center_scale: 1.0,
            noise: 1.0,
            seed: 1993,
        }
    }
}

pub fn gaussian_blobs(cfg: &BlobsConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.dim == 0 || cfg.modes_per_class == 0 {
        return Err(Error::InvalidArgument(
            "blobs need ≥2 classes, ≥1 dimension and ≥1 mode".into(),
        ));
    }
    if !(cfg.noise > 0.0 && cfg.center_scale > 0.0) {
        return Err(Error::InvalidArgument("blob scales must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centre = Normal::new(0.0, cfg.center_scale).expect("positive std");
    let noise = Normal::new(0.0, cfg.noise).expect("positive std");
    let centres: Vec<Vec<Vec<f64>>> = (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.modes_per_class)
                .map(|_| (0..cfg.dim).map(|_| centre.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let draw = |per_class: usize, rng: &mut ChaCha8Rng| {
        let n = per_class * cfg.num_classes;
        let mut x = Array2::zeros((n, cfg.dim));
        let mut y = Vec::with_capacity(n);
        let mut row = 0;
        for (c, modes) in centres.iter().enumerate() {
            for i in 0..per_class {
                let mode = &modes[i % modes.len()];
                for (j, m) in mode.iter().enumerate() {
                    x[[row, j]] = m + noise.sample(rng);
                }
                y.push(c);
                row += 1;
            }
        }
        LabeledSet { x, y }
    };
    let train = draw(cfg.train_per_class, &mut rng);
    let test = draw(cfg.test_per_class, &mut rng);
    Dataset::new("blobs", cfg.num_classes, train, test)
}

/// The 1797-image 8×8 handwritten-digit set (UCI optical recognition of
/// handwritten digits, test portion), scaled to `[0, 1]`. Every fifth image
/// of each class goes to the test split.
pub fn digits() -> Result<Dataset> {
    let mut text = String::new();
    GzDecoder::new(DIGITS_GZ).read_to_string(&mut text)?;
    let all = parse_csv(&text, 10)?;
    let mut seen = [0usize; 10];
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, &y) in all.y.iter().enumerate() {
        if seen[y] % 5 == 4 {
            te.push(i);
        } else {
            tr.push(i);
        }
        seen[y] += 1;
    }
    let mut train = all.select(&tr);
    let mut test = all.select(&te);
    train.x.mapv_inplace(|v| v / 16.0);
    test.x.mapv_inplace(|v| v / 16.0);
    Dataset::new("digits", 10, train, test)
}

/// Parses headerless CSV rows of the form `f_1,...,f_D,label`.
pub fn parse_csv(text: &str, num_classes: usize) -> Result<LabeledSet> {
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::MissingData(format!(
                "line {}: need features and a label",
                lineno + 1
            )));
        }
        let dim = fields.len() - 1;
        if *width.get_or_insert(dim) != dim {
            return Err(Error::Shape(format!("line {}: ragged row", lineno + 1)));
        }
        for f in &fields[..dim] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("line {}: bad number {f:?}", lineno + 1)))?;
            data.push(v);
        }
        let label: f64 = fields[dim]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("line {}: bad label", lineno + 1)))?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "line {}: label must be a non-negative integer",
                lineno + 1
            )));
        }
        let label = label as usize;
        if label >= num_classes {
            return Err(Error::Label { label, num_classes });
        }
        y.push(label);
    }
    let dim = width.ok_or_else(|| Error::MissingData("empty csv".into()))?;
    let x = Array2::from_shape_vec((y.len(), dim), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(LabeledSet { x, y })
}

pub fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Path::new(&dir).join(p),
        None => p.to_path_buf(),
    }
}

pub fn load_csv(train: &Path, test: &Path, num_classes: usize) -> Result<Dataset> {
    let tr = std::fs::read_to_string(resolve_data_path(train))?;
    let te = std::fs::read_to_string(resolve_data_path(test))?;
    Dataset::new(
        "csv",
        num_classes,
        parse_csv(&tr, num_classes)?,
        parse_csv(&te, num_classes)?,
    )
}

/// Serializable choice of dataset for experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs(BlobsConfig),
    Digits,
    Csv {
        train: PathBuf,
        test: PathBuf,
        num_classes: usize,
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::Blobs(cfg) => gaussian_blobs(cfg),
            DatasetConfig::Digits => digits(),
            DatasetConfig::Csv {
                train,
                test,
                num_classes,
            } => load_csv(train, test, *num_classes),
        }
    }
}

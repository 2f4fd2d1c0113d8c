//! Desk-scale datasets and the seeded 70/10/20 split.

use std::fs;
use std::path::{Path, PathBuf};

use gtn_core::data::Dataset;
use gtn_core::nn::InputShape;
use gtn_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("dataset needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Core(#[from] gtn_core::Error),
}

type Result<T> = std::result::Result<T, DatasetError>;

fn default_points() -> usize {
    200
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Interleaved 2-D arms; `noise` is the standard deviation of the
    /// angular jitter in radians.
    Spiral {
        classes: usize,
        points_per_class: usize,
        noise: f64,
    },
    /// Unit-variance Gaussian clusters centred on `±separation` along the
    /// coordinate axes.
    Blobs {
        classes: usize,
        dims: usize,
        separation: f64,
        #[serde(default = "default_points")]
        points_per_class: usize,
    },
    /// Numeric CSV; every column except `label_column` is a feature.
    Csv {
        path: PathBuf,
        label_column: usize,
        #[serde(default = "default_true")]
        has_header: bool,
    },
    /// IDX image and label files (MNIST layout), scaled to `[0, 1]`.
    IdxImages { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DatasetSpec {
    pub fn classes(&self) -> Option<usize> {
        match self {
            Self::Spiral { classes, .. } | Self::Blobs { classes, .. } => Some(*classes),
            _ => None,
        }
    }

    /// Resolves relative file paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            Self::Csv { path, .. } => fix(path),
            Self::IdxImages { images, labels } => {
                fix(images);
                fix(labels);
            }
            _ => {}
        }
    }
}

/// Generates (or loads) the full dataset and splits it 70/10/20.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = match spec {
        DatasetSpec::Spiral {
            classes,
            points_per_class,
            noise,
        } => spiral(*classes, *points_per_class, *noise, &mut rng)?,
        DatasetSpec::Blobs {
            classes,
            dims,
            separation,
            points_per_class,
        } => blobs(*classes, *dims, *separation, *points_per_class, &mut rng)?,
        DatasetSpec::Csv {
            path,
            label_column,
            has_header,
        } => load_csv(path, *label_column, *has_header)?,
        DatasetSpec::IdxImages { images, labels } => load_idx(images, labels)?,
    };
    split(&full, &mut rng)
}

fn check_classes(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(DatasetError::TooFewClasses(classes));
    }
    Ok(())
}

pub fn spiral(classes: usize, per_class: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    check_classes(classes)?;
    let jitter = Normal::new(0.0, noise.max(0.0)).map_err(|e| DatasetError::Malformed {
        what: "spiral noise",
        detail: e.to_string(),
    })?;
    let mut x = Vec::with_capacity(classes * per_class * 2);
    let mut y = Vec::with_capacity(classes * per_class);
    let arc = 4.0;
    for c in 0..classes {
        for i in 0..per_class {
            let frac = (i + 1) as f64 / per_class as f64;
            let t = arc * (c as f64 + frac) + jitter.sample(rng);
            x.extend([frac * t.sin(), frac * t.cos()]);
            y.push(c);
        }
    }
    Ok(Dataset::new(
        Tensor::from_f64(&[y.len(), 2], &x)?,
        y,
        classes,
        InputShape::Vector { dim: 2 },
    )?)
}

pub fn blobs(classes: usize, dims: usize, separation: f64, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    check_classes(classes)?;
    if dims == 0 {
        return Err(DatasetError::Malformed {
            what: "blobs",
            detail: "dims must be positive".into(),
        });
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut x = Vec::with_capacity(classes * per_class * dims);
    let mut y = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let axis = c % dims;
        let sign = if (c / dims) % 2 == 0 { 1.0 } else { -1.0 };
        for _ in 0..per_class {
            for d in 0..dims {
                let centre = if d == axis { sign * separation } else { 0.0 };
                x.push(centre + unit.sample(rng));
            }
            y.push(c);
        }
    }
    Ok(Dataset::new(
        Tensor::from_f64(&[y.len(), dims], &x)?,
        y,
        classes,
        InputShape::Vector { dim: dims },
    )?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })
}

fn labels_to_classes(labels: &[usize]) -> Result<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    check_classes(classes)?;
    Ok(classes)
}

pub fn load_csv(path: &Path, label_column: usize, has_header: bool) -> Result<Dataset> {
    let bytes = read(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(has_header).from_reader(bytes.as_slice());
    let malformed = |detail: String| DatasetError::Malformed { what: "csv", detail };
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        if label_column >= rec.len() {
            return Err(malformed(format!("row {row}: no column {label_column}")));
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(malformed(format!("row {row}: {} fields, expected {w}", rec.len())));
        }
        for (col, field) in rec.iter().enumerate() {
            let field = field.trim();
            if col == label_column {
                y.push(field.parse::<usize>().map_err(|e| malformed(format!("row {row} label '{field}': {e}")))?);
            } else {
                x.push(field.parse::<f64>().map_err(|e| malformed(format!("row {row} col {col} '{field}': {e}")))?);
            }
        }
    }
    let dim = width.ok_or_else(|| malformed("no rows".into()))? - 1;
    if dim == 0 {
        return Err(malformed("no feature columns".into()));
    }
    let classes = labels_to_classes(&y)?;
    Ok(Dataset::new(
        Tensor::from_f64(&[y.len(), dim], &x)?,
        y,
        classes,
        InputShape::Vector { dim },
    )?)
}

fn idx_header(bytes: &[u8], what: &'static str, dtype: u8, rank: usize) -> Result<(Vec<usize>, usize)> {
    let malformed = |detail: String| DatasetError::Malformed { what, detail };
    if bytes.len() < 4 + 4 * rank || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != dtype || bytes[3] as usize != rank {
        return Err(malformed(format!("expected ubyte rank-{rank} IDX header")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let offset = 4 + 4 * rank;
    if bytes.len() - offset != dims.iter().product::<usize>() {
        return Err(malformed(format!("payload size does not match dims {dims:?}")));
    }
    Ok((dims, offset))
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    const UBYTE: u8 = 0x08;
    let img = read(images)?;
    let lab = read(labels)?;
    let (idims, ioff) = idx_header(&img, "idx images", UBYTE, 3)?;
    let (ldims, loff) = idx_header(&lab, "idx labels", UBYTE, 1)?;
    if idims[0] != ldims[0] {
        return Err(DatasetError::Malformed {
            what: "idx",
            detail: format!("{} images but {} labels", idims[0], ldims[0]),
        });
    }
    let y: Vec<usize> = lab[loff..].iter().map(|&b| b as usize).collect();
    let classes = labels_to_classes(&y)?;
    let x: Vec<f64> = img[ioff..].iter().map(|&b| b as f64 / 255.0).collect();
    let (h, w) = (idims[1], idims[2]);
    Ok(Dataset::new(
        Tensor::from_f64(&[y.len(), h * w], &x)?,
        y,
        classes,
        InputShape::Image {
            channels: 1,
            height: h,
            width: w,
        },
    )?)
}

fn split(full: &Dataset, rng: &mut ChaCha8Rng) -> Result<Splits> {
    let n = full.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(DatasetError::Malformed {
            what: "split",
            detail: format!("{n} rows are too few for a 70/10/20 split"),
        });
    }
    Ok(Splits {
        train: full.subset(&order[..n_train]),
        validation: full.subset(&order[n_train..n_train + n_val]),
        test: full.subset(&order[n_train + n_val..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_split_sizes() {
        let spec = DatasetSpec::Spiral {
            classes: 4,
            points_per_class: 250,
            noise: 0.1,
        };
        let s = make_dataset(&spec, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (700, 100, 200));
        assert_eq!(s, make_dataset(&spec, 1).unwrap());
        assert_ne!(s.train, make_dataset(&spec, 2).unwrap().train);
    }

    #[test]
    fn too_few_classes() {
        let spec = DatasetSpec::Blobs {
            classes: 1,
            dims: 2,
            separation: 3.0,
            points_per_class: 10,
        };
        assert!(matches!(make_dataset(&spec, 0), Err(DatasetError::TooFewClasses(1))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut body = String::from("a,b,label\n");
        for i in 0..20 {
            body.push_str(&format!("{},{},{}\n", i as f64 * 0.5, -(i as f64), i % 2));
        }
        fs::write(&p, body).unwrap();
        let d = load_csv(&p, 2, true).unwrap();
        assert_eq!((d.len(), d.classes), (20, 2));
        assert_eq!(d.inputs.data()[2..4], [0.5, -1.0]);
        fs::write(&p, "a,label\nx,1\n").unwrap();
        assert!(matches!(load_csv(&p, 1, true), Err(DatasetError::Malformed { .. })));
    }

    #[test]
    fn idx_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102, 255, 0, 0, 0]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
        fs::write(dir.path().join("i"), &img).unwrap();
        fs::write(dir.path().join("l"), &lab).unwrap();
        let d = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.inputs.data()[..4], [0.0, 1.0, 0.2, 0.4]);
        assert!(d.input.is_image());
        fs::write(dir.path().join("l"), &lab[..9]).unwrap();
        assert!(load_idx(&dir.path().join("i"), &dir.path().join("l")).is_err());
    }
}

//! Labelled datasets: CSV I/O and deterministic synthetic generators.
//!
//! The on-disk format is a headerless CSV with `d` feature columns followed
//! by one integer class label per line. Features are written with shortest
//! round-trip formatting, so save/load is lossless for `f32`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// A classification dataset: `[n, d]` features plus one label per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Feature matrix, one sample per row.
    pub features: Tensor,
    /// Class labels, one per sample, in `[0, num_classes)`.
    pub labels: Vec<usize>,
    /// Number of classes (`max label + 1`).
    pub num_classes: usize,
}

impl Dataset {
    /// Build a dataset, deriving `num_classes` from the largest label.
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "features must be [n, d], got shape {:?}",
                features.shape()
            )));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows vs {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite {
                location: "dataset features".into(),
            });
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// True when the dataset holds no samples.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        let mut out = Dataset::new(Tensor::new(vec![indices.len(), d], data)?, labels)?;
        // Preserve the class count even if the subset misses some classes.
        out.num_classes = out.num_classes.max(self.num_classes);
        Ok(out)
    }

    /// Deterministically shuffle rows with the given seed.
    pub fn shuffled(&self, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        // Fisher-Yates with explicit draws so the permutation is stable
        // across rand versions.
        for i in (1..idx.len()).rev() {
            let j = (rand::Rng::gen_range(&mut rng, 0..=i as u64)) as usize;
            idx.swap(i, j);
        }
        self.select(&idx)
    }

    /// Split into a head of `n` samples and the remaining tail.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    /// Load from a headerless CSV (`d` float columns, then an integer label).
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut data: Vec<f32> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        let mut dim: Option<usize> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    detail: "expected at least one feature and a label".into(),
                });
            }
            let d = fields.len() - 1;
            match dim {
                None => dim = Some(d),
                Some(expected) if expected != d => {
                    return Err(Error::Csv {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        detail: format!("expected {expected} features, found {d}"),
                    })
                }
                _ => {}
            }
            for field in &fields[..d] {
                let v: f32 = field.trim().parse().map_err(|_| Error::Csv {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    detail: format!("invalid float {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        location: format!("{}:{}", path.display(), lineno + 1),
                    });
                }
                data.push(v);
            }
            let label_field = fields[d].trim();
            let label: i64 = label_field.parse().map_err(|_| Error::Label {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: format!("invalid integer label {label_field:?}"),
            })?;
            if label < 0 {
                return Err(Error::Label {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    detail: format!("negative label {label}"),
                });
            }
            labels.push(label as usize);
        }
        let d = dim.ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            line: 0,
            detail: "empty dataset".into(),
        })?;
        let n = labels.len();
        Dataset::new(Tensor::new(vec![n, d], data)?, labels)
    }

    /// Write to CSV in the format [`Dataset::load_csv`] reads.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for i in 0..self.len() {
            let mut line = String::new();
            for v in self.features.row(i) {
                line.push_str(&format!("{v}"));
                line.push(',');
            }
            line.push_str(&format!("{}\n", self.labels[i]));
            out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Gaussian blobs: `n_per_class` samples around each center with isotropic
/// noise. Samples are emitted class-interleaved, so any prefix is roughly
/// class-balanced.
pub fn gaussian_mixture(
    n_per_class: usize,
    centers: &[Vec<f32>],
    noise: f32,
    seed: u64,
) -> Result<Dataset> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("need at least one center".into()));
    }
    let d = centers[0].len();
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidArgument(
            "centers must share a positive dimension".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = centers.len();
    let n = n_per_class * k;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for (class, center) in centers.iter().enumerate() {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c + noise * z as f32);
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels)
}

/// Gaussian blobs spaced evenly on a circle of the given radius, one class
/// per blob. With enough classes the angular boundaries are tight, which
/// punishes models that lose representational capacity.
pub fn ring_of_blobs(
    classes: usize,
    n_per_class: usize,
    radius: f32,
    noise: f32,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|i| {
            let theta = i as f32 * std::f32::consts::TAU / classes as f32;
            vec![radius * theta.cos(), radius * theta.sin()]
        })
        .collect();
    gaussian_mixture(n_per_class, &centers, noise, seed)
}

/// Two interleaved spirals in the plane, one class per arm.
pub fn two_spirals(n_per_class: usize, turns: f32, noise: f32, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_per_class {
        let t = 0.2 + 0.8 * (i as f32 / n_per_class.max(1) as f32);
        let angle = t * turns * std::f32::consts::TAU;
        for class in 0..2 {
            let rot = angle + class as f32 * std::f32::consts::PI;
            let zx: f64 = StandardNormal.sample(&mut rng);
            let zy: f64 = StandardNormal.sample(&mut rng);
            data.push(t * rot.cos() + noise * zx as f32);
            data.push(t * rot.sin() + noise * zy as f32);
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels)
}

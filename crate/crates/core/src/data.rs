//! Datasets: seeded synthetic classification tasks, a headerless CSV
//! format (`f_1,...,f_d,label` per line) and feature standardization.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Tensor};
use crate::rng;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Domain(format!(
                "dataset features must be 2-D, got shape {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Layout {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.feature_dim();
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Domain(format!("sample index {i} out of range {}", self.len())));
            }
            x.extend_from_slice(self.features.row(i));
            y.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), d, x)?, y))
    }

    /// New dataset holding the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("subset"));
        }
        let (x, y) = self.gather(indices)?;
        Dataset::new(x, y, self.num_classes)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let (x, y) = self.gather(indices)?;
        Batch::new(x, y)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Writes the headerless CSV format. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for i in 0..self.len() {
            let (x, y) = self.sample(i);
            for v in x {
                write!(out, "{v:?},")?;
            }
            writeln!(out, "{y}")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// Isotropic unit-variance clusters around simplex vertices of radius 3.
    Blobs { dim: usize },
    /// Two interleaved spiral arms per class in the plane.
    Spirals { noise: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn blobs(num_classes: usize, samples_per_class: usize, dim: usize, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Blobs { dim },
            num_classes,
            samples_per_class,
            seed,
        }
    }

    pub fn spirals(num_classes: usize, samples_per_class: usize, noise: f64, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Spirals { noise },
            num_classes,
            samples_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Domain("need at least one sample per class".into()));
        }
        match self.kind {
            SyntheticKind::Blobs { dim } if dim < 1 => {
                Err(Error::Domain("blob dimension must be positive".into()))
            }
            SyntheticKind::Spirals { noise } if !(noise >= 0.0 && noise.is_finite()) => {
                Err(Error::Domain(format!("spiral noise must be non-negative, got {noise}")))
            }
            _ => Ok(()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            SyntheticKind::Blobs { dim } => dim,
            SyntheticKind::Spirals { .. } => 2,
        }
    }
}

/// Blob radius in units of the per-dimension noise standard deviation.
const BLOB_RADIUS: f64 = 3.0;

/// Centers of a regular simplex with `classes` vertices at distance
/// `BLOB_RADIUS` from the origin, embedded in the first `classes - 1`
/// coordinates. Falls back to seeded random directions when the space is
/// too small to hold the simplex.
fn blob_centers(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    if classes - 1 > dim {
        let mut s = rng::stream(seed, &[rng::domain::DATA, 1]);
        return (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| s.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| BLOB_RADIUS * x / norm).collect()
            })
            .collect();
    }
    // Orthonormal basis of the centered simplex span (Gram-Schmidt on
    // e_c - 1/C), then coordinates of each centered vertex in that basis.
    let centered = |c: usize| -> Vec<f64> {
        (0..classes)
            .map(|j| if j == c { 1.0 } else { 0.0 } - 1.0 / classes as f64)
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes - 1);
    for c in 0..classes - 1 {
        let mut v = centered(c);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&v, &v).sqrt();
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    let vertex_norm = dot(&centered(0), &centered(0)).sqrt();
    (0..classes)
        .map(|c| {
            let v = centered(c);
            let mut center = vec![0.0; dim];
            for (k, b) in basis.iter().enumerate() {
                center[k] = BLOB_RADIUS * dot(&v, b) / vertex_norm;
            }
            center
        })
        .collect()
}

/// All samples of a synthetic task, grouped by class.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.num_classes;
    let n = spec.samples_per_class;
    let d = spec.feature_dim();
    let mut s = rng::stream(spec.seed, &[rng::domain::DATA, 0]);
    let mut x = Vec::with_capacity(c * n * d);
    let mut y = Vec::with_capacity(c * n);
    match spec.kind {
        SyntheticKind::Blobs { dim } => {
            let centers = blob_centers(c, dim, spec.seed);
            for (class, center) in centers.iter().enumerate() {
                for _ in 0..n {
                    x.extend(center.iter().map(|m| m + s.sample::<f64, _>(StandardNormal)));
                    y.push(class);
                }
            }
        }
        SyntheticKind::Spirals { noise } => {
            let arms = 2 * c;
            for class in 0..c {
                for i in 0..n {
                    // Alternate between the class's two arms, which sit
                    // opposite each other.
                    let arm = class + (i % 2) * c;
                    let t: f64 = s.random_range(0.05..1.0);
                    let theta = 2.0 * PI * arm as f64 / arms as f64 + 3.0 * PI * t;
                    let e1: f64 = s.sample(StandardNormal);
                    let e2: f64 = s.sample(StandardNormal);
                    x.push(t * theta.cos() + noise * e1);
                    x.push(t * theta.sin() + noise * e2);
                    y.push(class);
                }
            }
        }
    }
    Dataset::new(Tensor::matrix(c * n, d, x)?, y, c)
}

/// Stratified 80/20 split: each class contributes `round(0.2 * n_c)` test
/// samples chosen by a seeded shuffle; both halves are then shuffled.
pub fn split_train_test(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut s = rng::stream(seed, &[rng::domain::SPLIT]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut test_counts: Vec<usize> = by_class
        .iter()
        .map(|idx| ((1.0 - TRAIN_FRACTION) * idx.len() as f64).round() as usize)
        .collect();
    if test_counts.iter().sum::<usize>() == 0 {
        // Tiny classes round to zero test samples; give the first nonempty
        // class one so neither half is empty.
        if let Some(c) = by_class.iter().position(|idx| !idx.is_empty()) {
            test_counts[c] = 1;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, &k) in by_class.iter_mut().zip(&test_counts) {
        idx.shuffle(&mut s);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} samples cannot be split into train and test sets",
            dataset.len()
        )));
    }
    train.shuffle(&mut s);
    test.shuffle(&mut s);
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    split_train_test(&generate(spec)?, spec.seed)
}

/// Reads `f_1,...,f_d,label` rows. The feature width is fixed by the first
/// row; errors carry the 1-based line number.
pub fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut width: Option<usize> = None;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(parse_err(line, "need at least one feature and a label".into()));
        }
        let d = record.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(parse_err(line, format!("expected {w} features, found {d}")));
            }
            _ => {}
        }
        for cell in record.iter().take(d) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric feature {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {cell:?}")));
            }
            x.push(v);
        }
        let cell = record.get(d).unwrap().trim();
        let label: usize = cell
            .parse()
            .map_err(|_| parse_err(line, format!("label {cell:?} is not a class index")))?;
        if label >= num_classes {
            return Err(parse_err(line, format!("label {label} outside [0, {num_classes})")));
        }
        y.push(label);
    }
    let d = width.ok_or_else(|| parse_err(1, "file contains no samples".into()))?;
    Dataset::new(Tensor::matrix(y.len(), d, x)?, y, num_classes)
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let n = dataset.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "standardization needs at least 2 samples, got {n}"
            )));
        }
        let d = dataset.feature_dim();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(dataset.features.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(dataset.features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Standardizer { mean, std })
    }

    /// Zero-variance features are left untouched.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        let d = dataset.feature_dim();
        if d != self.mean.len() {
            return Err(Error::InputShape {
                expected: self.mean.len(),
                actual: d,
            });
        }
        let mut x = dataset.features.values().to_vec();
        for row in x.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                if *s > 0.0 {
                    *v = (*v - m) / s;
                }
            }
        }
        Dataset::new(Tensor::matrix(dataset.len(), d, x)?, dataset.labels.clone(), dataset.num_classes)
    }
}

pub fn normalize(dataset: &Dataset) -> Result<(Dataset, Standardizer)> {
    let stats = Standardizer::fit(dataset)?;
    Ok((stats.apply(dataset)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(rows: &[&[f64]], labels: &[usize], classes: usize) -> Dataset {
        let d = rows[0].len();
        let x = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Dataset::new(Tensor::matrix(rows.len(), d, x).unwrap(), labels.to_vec(), classes).unwrap()
    }

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn blobs_split_sizes_and_balance() {
        let (train, test) = gen_synthetic(&SyntheticSpec::blobs(3, 100, 2, 11)).unwrap();
        assert_eq!((train.len(), test.len()), (240, 60));
        for count in train.class_counts() {
            assert!((79..=81).contains(&count));
        }
        assert_eq!(train.feature_dim(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::spirals(3, 40, 0.1, 5);
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SyntheticSpec::spirals(3, 40, 0.1, 6);
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn simplex_centers_are_equidistant() {
        for (c, d) in [(3, 2), (10, 20), (4, 3)] {
            let centers = blob_centers(c, d, 0);
            for a in 0..c {
                let r: f64 = centers[a].iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((r - BLOB_RADIUS).abs() < 1e-12);
                for b in a + 1..c {
                    let dist: f64 = centers[a]
                        .iter()
                        .zip(&centers[b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    let want = BLOB_RADIUS * (2.0 * c as f64 / (c as f64 - 1.0)).sqrt();
                    assert!((dist - want).abs() < 1e-12);
                }
            }
        }
        // too many classes for the dimension: still at the configured radius
        for center in blob_centers(5, 2, 3) {
            let r: f64 = center.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - BLOB_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_centroid_separates_blobs() {
        let (train, test) = gen_synthetic(&SyntheticSpec::blobs(3, 100, 2, 21)).unwrap();
        let mut centroids = vec![vec![0.0; 2]; 3];
        for i in 0..train.len() {
            let (x, y) = train.sample(i);
            centroids[y].iter_mut().zip(x).for_each(|(c, v)| *c += v);
        }
        let counts = train.class_counts();
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let (x, y) = test.sample(i);
                let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let best = (0..3).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == y
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.95, "{correct}/{}", test.len());
    }

    #[test]
    fn tiny_classes_still_split() {
        let (train, test) = gen_synthetic(&SyntheticSpec::blobs(2, 1, 2, 0)).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
        assert!(gen_synthetic(&SyntheticSpec::blobs(1, 10, 2, 0)).is_err());
    }

    #[test]
    fn load_simple_csv() {
        let f = write_file("1.0,2.0,0\n3.0,4.0,1\n");
        let ds = load_csv(f.path(), 2).unwrap();
        assert_eq!((ds.len(), ds.feature_dim()), (2, 2));
        assert_eq!(ds.sample(1), (&[3.0, 4.0][..], 1));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let empty = write_file("");
        assert!(matches!(load_csv(empty.path(), 2), Err(Error::Parse { .. })));

        let bad_label = write_file("1.0,2.0,0\n3.0,4.0,2\n");
        match load_csv(bad_label.path(), 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let ragged = write_file("1.0,2.0,0\n1.0,0\n");
        assert!(matches!(load_csv(ragged.path(), 2), Err(Error::Parse { line: 2, .. })));
        let text = write_file("1.0,x,0\n");
        assert!(matches!(load_csv(text.path(), 2), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = generate(&SyntheticSpec::spirals(2, 30, 0.0, 3)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(f.path()).unwrap();
        assert_eq!(load_csv(f.path(), 2).unwrap(), ds);
    }

    #[test]
    fn normalize_examples() {
        let (out, _) = normalize(&dataset(&[&[1.0, 5.0], &[3.0, 5.0]], &[0, 1], 2)).unwrap();
        assert_eq!(out.features().values(), &[-1.0, 5.0, 1.0, 5.0]);
        assert!(normalize(&dataset(&[&[1.0]], &[0], 2)).is_err());
    }

    #[test]
    fn normalized_moments() {
        let ds = generate(&SyntheticSpec::blobs(4, 50, 5, 8)).unwrap();
        let (out, _) = normalize(&ds).unwrap();
        let d = out.feature_dim();
        let n = out.len() as f64;
        for j in 0..d {
            let col: Vec<f64> = (0..out.len()).map(|i| out.sample(i).0[j]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var.sqrt() - 1.0).abs() < 1e-12);
        }
    }
}

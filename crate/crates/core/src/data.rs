//! Feature datasets, file formats, synthetic covariate-shift tasks and
//! mini-batching.
//!
//! CSV layout: one sample per line, no header. The first column is an integer
//! label (`-1` marks an unlabelled sample), the remaining columns are features.
//! Either every row is labelled or none is.
//!
//! Binary layout (little endian): the 8-byte magic `DDAFEAT1`, then `u64` n, d
//! and C, then n `i64` labels (`-1` = unlabelled) and n·d `f64` features in
//! row-major order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const BINARY_MAGIC: &[u8; 8] = b"DDAFEAT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.bin` selects the binary layout, anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Format::Binary,
            _ => Format::Csv,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        domain: Domain,
        classes: usize,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if !features.is_finite() {
            return Err(Error::Data("dataset contains non-finite features".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::Data(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
            }
        }
        Ok(Dataset {
            features,
            labels,
            domain,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// The labels, or a data error naming `what` when absent.
    pub fn require_labels(&self, what: &str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("{what} requires a labelled dataset")))
    }

    pub fn subset(&self, indices: &[usize]) -> (Matrix, Option<Vec<usize>>) {
        let x = self.features.select_rows(indices);
        let y = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        (x, y)
    }
}

pub fn load_features(path: &Path, format: Format, domain: Domain) -> Result<Dataset> {
    match format {
        Format::Csv => load_csv(path, domain),
        Format::Binary => load_binary(path, domain),
    }
}

pub fn save_features(ds: &Dataset, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Csv => save_csv(ds, path),
        Format::Binary => save_binary(ds, path),
    }
}

fn load_csv(path: &Path, domain: Domain) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut data = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let label_cell = cells.next().unwrap_or("").trim();
        let label: i64 = label_cell.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("label {label_cell:?} is not an integer"),
        })?;
        if label < -1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label {label} is negative (only -1 marks unlabelled)"),
            });
        }
        let mut count = 0;
        for cell in cells {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("feature {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("feature {cell:?} is not finite"),
                });
            }
            data.push(v);
            count += 1;
        }
        match width {
            None if count == 0 => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "row has no feature columns".into(),
                })
            }
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("row has {count} features, expected {w}"),
                })
            }
            _ => {}
        }
        if let Some(&first) = raw_labels.first() {
            if (first == -1) != (label == -1) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "mixed labelled and unlabelled rows".into(),
                });
            }
        }
        raw_labels.push(label);
    }
    let Some(d) = width else {
        return Err(Error::Data(format!("{} contains no samples", path.display())));
    };
    let n = raw_labels.len();
    let features = Matrix::from_vec(n, d, data)?;
    let (labels, classes) = labels_from_raw(&raw_labels);
    Dataset::new(features, labels, domain, classes)
}

fn labels_from_raw(raw: &[i64]) -> (Option<Vec<usize>>, usize) {
    if raw.iter().all(|&l| l == -1) {
        return (None, 0);
    }
    let labels: Vec<usize> = raw.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    (Some(labels), classes)
}

fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(ds.len() * (ds.dim() * 20 + 4));
    for i in 0..ds.len() {
        match &ds.labels {
            Some(l) => out.push_str(&l[i].to_string()),
            None => out.push_str("-1"),
        }
        for v in ds.features.row(i) {
            out.push(',');
            // `Display` for f64 prints the shortest string that parses back
            // to the same bits.
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn save_binary(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + ds.len() * (8 + 8 * ds.dim()));
    buf.extend_from_slice(BINARY_MAGIC);
    for v in [ds.len(), ds.dim(), ds.classes] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for i in 0..ds.len() {
        let l = ds.labels.as_ref().map_or(-1i64, |l| l[i] as i64);
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for v in ds.features.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn load_binary(path: &Path, domain: Domain) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != BINARY_MAGIC {
        return Err(corrupt("missing binary feature header"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap());
    let (n, d, classes) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_add(n))
        .and_then(|w| w.checked_mul(8))
        .and_then(|b| b.checked_add(32))
        .ok_or_else(|| corrupt("header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(corrupt("file length does not match header"));
    }
    let mut raw = Vec::with_capacity(n);
    let mut off = 32;
    for _ in 0..n {
        raw.push(i64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        off += 8;
    }
    let data: Vec<f64> = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = Matrix::from_vec(n, d, data)?;
    let labels = if raw.iter().all(|&l| l == -1) {
        None
    } else if raw.iter().any(|&l| l < 0) {
        return Err(corrupt("mixed labelled and unlabelled rows"));
    } else {
        Some(raw.iter().map(|&l| l as usize).collect())
    };
    Dataset::new(features, labels, domain, classes)
}

/// Parameters of the synthetic covariate-shift task.
///
/// Source class `c` is an isotropic Gaussian centred at angle `2πc/C` on a
/// circle of radius 3 in the first two coordinates. The target draws from the
/// same process after the centres are rotated by `rotation_deg` and
/// translated by `shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftTask {
    pub n_per_class: usize,
    pub classes: usize,
    pub dim: usize,
    pub shift: (f64, f64),
    pub rotation_deg: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ShiftTask {
    fn default() -> Self {
        ShiftTask {
            n_per_class: 200,
            classes: 3,
            dim: 2,
            shift: (0.5, 0.5),
            rotation_deg: 30.0,
            noise_sigma: 0.35,
            seed: 0,
        }
    }
}

pub const CENTER_RADIUS: f64 = 3.0;

impl ShiftTask {
    /// Source and target class centres (first two coordinates).
    pub fn centers(&self) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let rot = self.rotation_deg.to_radians();
        let (s, c) = rot.sin_cos();
        let mut src = Vec::with_capacity(self.classes);
        let mut tgt = Vec::with_capacity(self.classes);
        for k in 0..self.classes {
            let a = std::f64::consts::TAU * k as f64 / self.classes as f64;
            let p = [CENTER_RADIUS * a.cos(), CENTER_RADIUS * a.sin()];
            src.push(p);
            tgt.push([
                c * p[0] - s * p[1] + self.shift.0,
                s * p[0] + c * p[1] + self.shift.1,
            ]);
        }
        (src, tgt)
    }

    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::Config(format!(
                "shift task needs classes >= 2 and dim >= 2, got {} and {}",
                self.classes, self.dim
            )));
        }
        if !(self.noise_sigma >= 0.0) || self.n_per_class == 0 {
            return Err(Error::Config("shift task needs noise >= 0 and n_per_class >= 1".into()));
        }
        let (src_c, tgt_c) = self.centers();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let source = self.sample(&src_c, Domain::Source, &mut rng)?;
        let target = self.sample(&tgt_c, Domain::Target, &mut rng)?;
        Ok((source, target))
    }

    fn sample(&self, centers: &[[f64; 2]], domain: Domain, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let noise = Normal::new(0.0, self.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let n = self.n_per_class * self.classes;
        let mut x = Matrix::zeros(n, self.dim);
        let mut y = Vec::with_capacity(n);
        let mut row = 0;
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..self.n_per_class {
                for j in 0..self.dim {
                    let base = if j < 2 { center[j] } else { 0.0 };
                    x.set(row, j, base + noise.sample(rng));
                }
                y.push(c);
                row += 1;
            }
        }
        Dataset::new(x, Some(y), domain, self.classes)
    }
}

/// Convenience wrapper matching the task parameters one by one.
pub fn gen_shifted_gaussians(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    shift: (f64, f64),
    rotation_deg: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    ShiftTask {
        n_per_class,
        classes,
        dim,
        shift,
        rotation_deg,
        noise_sigma,
        seed,
    }
    .generate()
}

/// Epoch-wise shuffled mini-batches over `0..n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchIterator {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Self {
        let mut it = BatchIterator {
            order: (0..n).collect(),
            cursor: 0,
            batch_size: batch_size.max(1),
            rng,
        };
        it.order.shuffle(&mut it.rng);
        it
    }

    /// Indices of the next batch. The last batch of an epoch may be short;
    /// the order is reshuffled once an epoch is exhausted.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    pub fn next_batch(&mut self, ds: &Dataset) -> (Matrix, Option<Vec<usize>>) {
        let idx = self.next_indices();
        ds.subset(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_hand_case() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "0,1.0,2.0\n1,3.0,4.0").unwrap();
        let ds = load_features(&p, Format::Csv, Domain::Source).unwrap();
        assert_eq!(ds.features.shape(), (2, 2));
        assert_eq!(ds.labels, Some(vec![0, 1]));
        assert_eq!(ds.features.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ds.classes, 2);
    }

    #[test]
    fn csv_all_unlabelled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "-1,0.5\n-1,1.5\n").unwrap();
        let ds = load_features(&p, Format::Csv, Domain::Target).unwrap();
        assert!(ds.labels.is_none());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("0,1.0,2.0\n1,3.0\n", 2),
            ("0,1.0\n1,abc\n", 2),
            ("0,1.0\n-1,2.0\n", 2),
            ("x,1.0\n", 1),
        ];
        for (i, (body, line)) in cases.iter().enumerate() {
            let p = dir.path().join(format!("{i}.csv"));
            fs::write(&p, body).unwrap();
            match load_features(&p, Format::Csv, Domain::Source) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, *line, "case {i}"),
                other => panic!("case {i}: {other:?}"),
            }
        }
    }

    #[test]
    fn rotation_by_half_turn_swaps_two_classes() {
        let task = ShiftTask {
            classes: 2,
            rotation_deg: 180.0,
            shift: (0.0, 0.0),
            ..ShiftTask::default()
        };
        let (src, tgt) = task.centers();
        for k in 0..2 {
            assert!((tgt[k][0] - src[1 - k][0]).abs() < 1e-12);
            assert!((tgt[k][1] - src[1 - k][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_rejects_tiny_tasks() {
        assert!(gen_shifted_gaussians(10, 1, 2, (0.0, 0.0), 0.0, 0.1, 0).is_err());
        assert!(gen_shifted_gaussians(10, 2, 1, (0.0, 0.0), 0.0, 0.1, 0).is_err());
    }

    #[test]
    fn whole_dataset_when_batch_exceeds_n() {
        let mut it = BatchIterator::new(5, 64, ChaCha8Rng::seed_from_u64(0));
        let mut b = it.next_indices();
        b.sort();
        assert_eq!(b, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn epoch_covers_every_index_with_short_tail() {
        let mut it = BatchIterator::new(10, 4, ChaCha8Rng::seed_from_u64(7));
        let sizes: Vec<usize> = (0..3).map(|_| it.next_indices().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut it = BatchIterator::new(10, 4, ChaCha8Rng::seed_from_u64(7));
        let mut all: Vec<usize> = (0..3).flat_map(|_| it.next_indices()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let mut a = BatchIterator::new(50, 8, ChaCha8Rng::seed_from_u64(3));
        let mut b = BatchIterator::new(50, 8, ChaCha8Rng::seed_from_u64(3));
        for _ in 0..20 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
    }
}

//! Synthetic multimodal data with a tunable spurious shortcut.
//!
//! Every sample has a causal factor `c` and a shortcut factor `s`. The label
//! depends on `c` only; `s` agrees with `c` with probability `ρ`, which differs
//! between the in-distribution splits (`rho_train`) and the OOD split
//! (`rho_test`).
//!
//! Feature layout, identical in every modality (the shortcut block can be
//! restricted to the first `shortcut_modalities` modalities):
//!
//! ```text
//! classification (K classes)          regression
//! causal   features [0, K), all positions    feature 0, all positions
//! shortcut features [K, 2K), last position   feature 1, last position
//! ```
//!
//! A class is written as `+snr` on its own feature and `−snr` on the others;
//! a score `c ∈ [−3, 3]` as `snr·c/3`. Gaussian noise of scale `noise_sigma`
//! is added to every entry.
//!
//! # Container format
//!
//! [`write_dataset`] emits one line of JSON ([`ContainerHeader`]) terminated by
//! `\n`, followed by raw little-endian `f64` arrays with no padding, in the
//! order listed in `header.arrays`. For each split (`train`, `val`, `test_id`,
//! `test_ood`) the arrays are `<split>/x<m>` for every modality (`N×L×d_in`,
//! row-major), then `<split>/labels`, `<split>/causal`, `<split>/shortcut`
//! (length `N`; class indices are stored as exact floats).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::par;
use crate::rng::RngStream;
use crate::task::{Labels, TaskKind};
use crate::tensor::Tensor;
use crate::vib::ModalityBatch;

pub const FORMAT_NAME: &str = "camib-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const SPLIT_NAMES: [&str; 4] = ["train", "val", "test_id", "test_ood"];

/// Bound of the regression factor range.
pub const SCORE_RANGE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSpec {
    /// Training samples.
    pub n_samples: usize,
    /// Samples in each of val, test_id and test_ood.
    pub n_eval: usize,
    pub modalities: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub task: TaskKind,
    pub rho_train: f64,
    pub rho_test: f64,
    pub causal_snr: f64,
    pub shortcut_snr: f64,
    pub noise_sigma: f64,
    /// How many modalities (the first ones) carry the shortcut block; all
    /// of them when absent.
    pub shortcut_modalities: Option<usize>,
    /// Standard deviation of the label noise for regression.
    pub label_noise: f64,
    pub seed: u64,
    /// Bumped by [`ood_shift`] so every shifted OOD split draws fresh samples.
    pub ood_round: u64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_eval: 500,
            modalities: 3,
            seq_len: 4,
            input_dim: 16,
            task: TaskKind::Classification { classes: 2 },
            rho_train: 0.9,
            rho_test: 0.1,
            causal_snr: 0.3,
            shortcut_snr: 2.0,
            noise_sigma: 1.0,
            shortcut_modalities: None,
            label_noise: 0.1,
            seed: 0,
            ood_round: 0,
        }
    }
}

impl BiasSpec {
    /// Width of each signal block.
    pub fn block_width(&self) -> usize {
        match self.task {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn causal_features(&self) -> std::ops::Range<usize> {
        0..self.block_width()
    }

    pub fn shortcut_features(&self) -> std::ops::Range<usize> {
        self.block_width()..2 * self.block_width()
    }

    pub fn shortcut_carriers(&self) -> usize {
        self.shortcut_modalities.unwrap_or(self.modalities)
    }

    pub fn shortcut_position(&self) -> usize {
        self.seq_len - 1
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 || self.n_eval == 0 {
            return cfg("n_samples and n_eval must be positive".into());
        }
        if self.modalities == 0 || self.seq_len == 0 {
            return cfg("modalities and seq_len must be positive".into());
        }
        if let TaskKind::Classification { classes } = self.task {
            if classes < 2 {
                return cfg(format!("classification needs at least 2 classes, got {classes}"));
            }
        }
        for (name, rho) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(0.0..=1.0).contains(&rho) {
                return cfg(format!("{name} = {rho} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("causal_snr", self.causal_snr),
            ("shortcut_snr", self.shortcut_snr),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return cfg(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.label_noise >= 0.0) {
            return cfg(format!("label_noise must be non-negative, got {}", self.label_noise));
        }
        if !(1..=self.modalities).contains(&self.shortcut_carriers()) {
            return cfg(format!(
                "shortcut_modalities must lie in 1..={}, got {}",
                self.modalities,
                self.shortcut_carriers()
            ));
        }
        if 2 * self.block_width() > self.input_dim {
            return cfg(format!(
                "two blocks of width {} do not fit in input_dim {}",
                self.block_width(),
                self.input_dim
            ));
        }
        Ok(())
    }
}

/// Same spec with the OOD coupling replaced and a fresh OOD sample stream.
pub fn ood_shift(spec: &BiasSpec, rho_test: f64) -> BiasSpec {
    BiasSpec {
        rho_test,
        ood_round: spec.ood_round.wrapping_add(1),
        ..spec.clone()
    }
}

/// One split plus its ground-truth factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub rho: f64,
    pub batch: ModalityBatch,
    pub causal: Vec<f64>,
    pub shortcut: Vec<f64>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of samples with `s = c`.
    pub fn agreement(&self) -> f64 {
        let hits = self.causal.iter().zip(&self.shortcut).filter(|(c, s)| c == s).count();
        hits as f64 / self.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: BiasSpec,
    pub train: Split,
    pub val: Split,
    pub test_id: Split,
    pub test_ood: Split,
}

impl SyntheticDataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test_id" => Ok(&self.test_id),
            "test_ood" => Ok(&self.test_ood),
            other => arg_err(format!("unknown split {other:?}; expected one of {SPLIT_NAMES:?}")),
        }
    }

    pub fn splits(&self) -> [&Split; 4] {
        [&self.train, &self.val, &self.test_id, &self.test_ood]
    }
}

fn draw_factors(spec: &BiasSpec, rho: f64, rng: &mut RngStream) -> (f64, f64) {
    match spec.task {
        TaskKind::Classification { classes } => {
            let c = rng.index(classes);
            let s = if rng.bernoulli(rho) {
                c
            } else {
                // uniform over the other classes, so that P(s = c) is exactly ρ
                let o = rng.index(classes - 1);
                if o >= c {
                    o + 1
                } else {
                    o
                }
            };
            (c as f64, s as f64)
        }
        TaskKind::Regression => {
            let c = rng.uniform_range(-SCORE_RANGE, SCORE_RANGE);
            let s = if rng.bernoulli(rho) {
                c
            } else {
                rng.uniform_range(-SCORE_RANGE, SCORE_RANGE)
            };
            (c, s)
        }
    }
}

fn write_block(token: &mut [f64], features: std::ops::Range<usize>, task: TaskKind, value: f64, snr: f64) {
    match task {
        TaskKind::Classification { .. } => {
            for (k, f) in features.enumerate() {
                token[f] += if k == value as usize { snr } else { -snr };
            }
        }
        TaskKind::Regression => token[features.start] += snr * value / SCORE_RANGE,
    }
}

fn generate_split(spec: &BiasSpec, name: &str, n: usize, rho: f64, mut rng: RngStream) -> Result<Split> {
    let (l, d) = (spec.seq_len, spec.input_dim);
    let mut inputs: Vec<Vec<f64>> = vec![Vec::with_capacity(n * l * d); spec.modalities];
    let mut causal = Vec::with_capacity(n);
    let mut shortcut = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (c, s) = draw_factors(spec, rho, &mut rng);
        causal.push(c);
        shortcut.push(s);
        labels.push(match spec.task {
            TaskKind::Classification { .. } => c,
            TaskKind::Regression => c + spec.label_noise * rng.normal(),
        });
        for (m, x) in inputs.iter_mut().enumerate() {
            for t in 0..l {
                let mut token: Vec<f64> = (0..d).map(|_| spec.noise_sigma * rng.normal()).collect();
                write_block(&mut token, spec.causal_features(), spec.task, c, spec.causal_snr);
                if t == spec.shortcut_position() && m < spec.shortcut_carriers() {
                    write_block(&mut token, spec.shortcut_features(), spec.task, s, spec.shortcut_snr);
                }
                x.extend(token);
            }
        }
    }
    let labels = match spec.task {
        TaskKind::Classification { classes } => Labels::Classes {
            classes,
            values: labels.iter().map(|&v| v as usize).collect(),
        },
        TaskKind::Regression => Labels::Scores(labels),
    };
    let inputs = inputs
        .into_iter()
        .map(|x| Tensor::new(&[n, l, d], x))
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        name: name.to_string(),
        rho,
        batch: ModalityBatch::new(inputs, labels)?,
        causal,
        shortcut,
    })
}

/// Deterministic in the spec; each split draws from its own forked stream.
pub fn generate(spec: &BiasSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let plans: Vec<(&str, usize, f64, RngStream)> = vec![
        ("train", spec.n_samples, spec.rho_train, root.fork("train")),
        ("val", spec.n_eval, spec.rho_train, root.fork("val")),
        ("test_id", spec.n_eval, spec.rho_train, root.fork("test_id")),
        ("test_ood", spec.n_eval, spec.rho_test, root.fork_index("test_ood", spec.ood_round)),
    ];
    let mut splits = par::map(plans, |(name, n, rho, rng)| generate_split(spec, name, n, rho, rng)).into_iter();
    let mut next = || splits.next().expect("four splits");
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train: next()?,
        val: next()?,
        test_id: next()?,
        test_ood: next()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub rho: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub format: String,
    pub version: u32,
    pub spec: BiasSpec,
    pub splits: Vec<SplitEntry>,
    pub arrays: Vec<ArrayEntry>,
}

fn split_arrays(split: &Split) -> Vec<(ArrayEntry, Vec<f64>)> {
    let n = split.len();
    let mut out: Vec<(ArrayEntry, Vec<f64>)> = split
        .batch
        .inputs()
        .iter()
        .enumerate()
        .map(|(m, x)| {
            (
                ArrayEntry {
                    name: format!("{}/x{m}", split.name),
                    shape: x.shape().to_vec(),
                },
                x.data().to_vec(),
            )
        })
        .collect();
    for (field, data) in [
        ("labels", split.batch.labels().as_f64()),
        ("causal", split.causal.clone()),
        ("shortcut", split.shortcut.clone()),
    ] {
        out.push((
            ArrayEntry {
                name: format!("{}/{field}", split.name),
                shape: vec![n],
            },
            data,
        ));
    }
    out
}

pub fn write_dataset<W: Write>(ds: &SyntheticDataset, mut w: W) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for split in ds.splits() {
        for (entry, data) in split_arrays(split) {
            arrays.push(entry);
            payload.push(data);
        }
    }
    let header = ContainerHeader {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        splits: ds
            .splits()
            .iter()
            .map(|s| SplitEntry {
                name: s.name.clone(),
                rho: s.rho,
                samples: s.len(),
            })
            .collect(),
        arrays,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for data in payload {
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated array data: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_dataset<R: Read>(r: R) -> Result<SyntheticDataset> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: ContainerHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container {} v{}",
            header.format, header.version
        )));
    }
    header.spec.validate()?;
    let mut arrays = header.arrays.iter();
    let mut splits = Vec::new();
    for entry in &header.splits {
        let mut inputs = Vec::new();
        for m in 0..header.spec.modalities {
            let a = arrays
                .next()
                .filter(|a| a.name == format!("{}/x{m}", entry.name))
                .ok_or_else(|| Error::Format(format!("missing {}/x{m}", entry.name)))?;
            let data = read_array(&mut r, a.shape.iter().product())?;
            inputs.push(Tensor::new(&a.shape, data)?);
        }
        let mut vectors = Vec::new();
        for field in ["labels", "causal", "shortcut"] {
            let a = arrays
                .next()
                .filter(|a| a.name == format!("{}/{field}", entry.name) && a.shape == [entry.samples])
                .ok_or_else(|| Error::Format(format!("missing {}/{field}", entry.name)))?;
            vectors.push(read_array(&mut r, a.shape[0])?);
        }
        let shortcut = vectors.pop().expect("shortcut");
        let causal = vectors.pop().expect("causal");
        let raw = vectors.pop().expect("labels");
        let labels = match header.spec.task {
            TaskKind::Classification { classes } => Labels::Classes {
                classes,
                values: raw.iter().map(|&v| v as usize).collect(),
            },
            TaskKind::Regression => Labels::Scores(raw),
        };
        splits.push(Split {
            name: entry.name.clone(),
            rho: entry.rho,
            batch: ModalityBatch::new(inputs, labels)?,
            causal,
            shortcut,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after the last array".into()));
    }
    let names: Vec<&str> = splits.iter().map(|s| s.name.as_str()).collect();
    if names != SPLIT_NAMES {
        return Err(Error::Format(format!("unexpected split list {names:?}")));
    }
    let mut it = splits.into_iter();
    Ok(SyntheticDataset {
        spec: header.spec,
        train: it.next().expect("train"),
        val: it.next().expect("val"),
        test_id: it.next().expect("test_id"),
        test_ood: it.next().expect("test_ood"),
    })
}

pub fn save(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    let f = fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<SyntheticDataset> {
    read_dataset(fs::File::open(path)?)
}

/// Which signal block a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Causal,
    Shortcut,
}

/// Features of one block, concatenated over modalities (and positions for the
/// causal block), plus a constant column.
pub fn block_features(spec: &BiasSpec, split: &Split, block: Block) -> Tensor {
    let (l, d) = (spec.seq_len, spec.input_dim);
    let (features, positions) = match block {
        Block::Causal => (spec.causal_features(), (0..l).collect::<Vec<_>>()),
        Block::Shortcut => (spec.shortcut_features(), vec![spec.shortcut_position()]),
    };
    let n = split.len();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = vec![1.0];
        let carriers = match block {
            Block::Causal => spec.modalities,
            Block::Shortcut => spec.shortcut_carriers(),
        };
        for x in &split.batch.inputs()[..carriers] {
            for &t in &positions {
                let base = (i * l + t) * d;
                row.extend(features.clone().map(|f| x.data()[base + f]));
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows).expect("rectangular features")
}

/// Solves `(XᵀX + ridge·I) W = XᵀY` by Gaussian elimination with partial pivoting.
fn least_squares(x: &Tensor, y: &Tensor, ridge: f64) -> Result<Tensor> {
    let p = x.cols();
    let mut a = x.transpose().matmul(x)?;
    for i in 0..p {
        a.set(i, i, a.at(i, i) + ridge);
    }
    let mut b = x.transpose().matmul(y)?;
    let q = b.cols();
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a.at(i, col).abs().total_cmp(&a.at(j, col).abs()))
            .expect("non-empty");
        if a.at(piv, col).abs() < 1e-300 {
            return arg_err("singular probe system");
        }
        for k in 0..p {
            let t = a.at(col, k);
            a.set(col, k, a.at(piv, k));
            a.set(piv, k, t);
        }
        for k in 0..q {
            let t = b.at(col, k);
            b.set(col, k, b.at(piv, k));
            b.set(piv, k, t);
        }
        for r in 0..p {
            if r == col {
                continue;
            }
            let f = a.at(r, col) / a.at(col, col);
            if f == 0.0 {
                continue;
            }
            for k in 0..p {
                a.set(r, k, a.at(r, k) - f * a.at(col, k));
            }
            for k in 0..q {
                b.set(r, k, b.at(r, k) - f * b.at(col, k));
            }
        }
    }
    for r in 0..p {
        let d = a.at(r, r);
        for k in 0..q {
            b.set(r, k, b.at(r, k) / d);
        }
    }
    Ok(b)
}

/// Accuracy of a least-squares linear probe fitted on `train` and scored on
/// the two test splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub id_accuracy: f64,
    pub ood_accuracy: f64,
}

fn probe_accuracy(spec: &BiasSpec, w: &Tensor, split: &Split, block: Block) -> Result<f64> {
    let pred = block_features(spec, split, block).matmul(w)?;
    let labels = split.batch.labels();
    let hits = match labels {
        Labels::Classes { values, .. } => values
            .iter()
            .enumerate()
            .filter(|&(i, &y)| {
                let row = pred.row(i);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("classes");
                best == y
            })
            .count(),
        // sign agreement for scores, non-negative counted as positive
        Labels::Scores(values) => values
            .iter()
            .enumerate()
            .filter(|&(i, &y)| (pred.at(i, 0) >= 0.0) == (y >= 0.0))
            .count(),
    };
    Ok(hits as f64 / split.len() as f64)
}

/// Linear probe on one signal block: one-hot least squares for classes,
/// plain least squares for scores.
pub fn linear_probe(ds: &SyntheticDataset, block: Block) -> Result<ProbeReport> {
    let x = block_features(&ds.spec, &ds.train, block);
    let y = ds.train.batch.labels().target_matrix();
    let w = least_squares(&x, &y, 1e-6)?;
    Ok(ProbeReport {
        id_accuracy: probe_accuracy(&ds.spec, &w, &ds.test_id, block)?,
        ood_accuracy: probe_accuracy(&ds.spec, &w, &ds.test_ood, block)?,
    })
}

pub fn shortcut_probe(ds: &SyntheticDataset) -> Result<ProbeReport> {
    linear_probe(ds, Block::Shortcut)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BiasSpec {
        BiasSpec {
            n_samples: 64,
            n_eval: 16,
            ..BiasSpec::default()
        }
    }

    #[test]
    fn full_coupling_copies_the_cause() {
        let ds = generate(&BiasSpec {
            rho_train: 1.0,
            ..small()
        })
        .unwrap();
        assert_eq!(ds.train.causal, ds.train.shortcut);
    }

    #[test]
    fn zero_coupling_with_two_classes_always_disagrees() {
        let ds = generate(&BiasSpec {
            rho_test: 0.0,
            ..small()
        })
        .unwrap();
        assert!(ds.test_ood.causal.iter().zip(&ds.test_ood.shortcut).all(|(c, s)| c != s));
    }

    #[test]
    fn shapes() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.train.batch.modalities(), 3);
        for x in ds.train.batch.inputs() {
            assert_eq!(x.shape(), &[64, 4, 16]);
        }
        assert_eq!(ds.test_ood.batch.labels().len(), 16);
    }

    #[test]
    fn capacity_error() {
        let spec = BiasSpec {
            input_dim: 5,
            task: TaskKind::Classification { classes: 3 },
            ..small()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn ood_shift_changes_only_the_ood_split() {
        let spec = small();
        let shifted = ood_shift(&spec, 0.5);
        assert_eq!(shifted.rho_test, 0.5);
        let a = generate(&spec).unwrap();
        let b = generate(&shifted).unwrap();
        assert_eq!(a.train, b.train);
        assert_ne!(a.test_ood, b.test_ood);
    }

    #[test]
    fn least_squares_recovers_exact_fit() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let y = Tensor::matrix(3, 1, vec![1.0, 3.0, 5.0]);
        let w = least_squares(&x, &y, 0.0).unwrap();
        assert!((w.data()[0] - 1.0).abs() < 1e-12 && (w.data()[1] - 2.0).abs() < 1e-12);
    }
}

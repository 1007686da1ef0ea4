//! MNIST loading, pixel-permutation and split-label task sequences, and a
//! synthetic stand-in dataset.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use forgetgate_autodiff::{stream, Rng, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directory holding the four MNIST IDX files.
pub const DATA_DIR_ENV: &str = "FORGETGATE_DATA_DIR";

pub const MNIST_PIXELS: usize = 784;
pub const MNIST_CLASSES: usize = 10;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

const PERMUTATION_TAG: u64 = 0x7065_726d;
const SYNTHETIC_TAG: u64 = 0x7379_6e74;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// n × d, every value in [0, 1].
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split, n_classes: usize) -> Result<Self> {
        if images.shape().len() != 2 || images.rows() != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} labels for images of shape {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::invalid("dataset", format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self {
            images,
            labels,
            split,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.cols()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// FNV-1a hash of each image quantized to bytes.
    pub fn content_hashes(&self) -> Vec<u64> {
        (0..self.len())
            .map(|i| {
                self.images.row(i).iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &p| {
                    (h ^ (p * 255.0).round() as u64).wrapping_mul(0x0000_0100_0000_01b3)
                })
            })
            .collect()
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            file: file.to_string(),
            offset,
            message: "truncated header".into(),
        })
}

/// Parses an IDX3 image file: returns (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            file: file.to_string(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Parse {
            file: file.to_string(),
            offset: 16 + body.len(),
            message: format!("truncated pixel data: need {need} bytes, have {}", body.len()),
        });
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            file: file.to_string(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Parse {
            file: file.to_string(),
            offset: 8 + body.len(),
            message: format!("truncated label data: need {n} bytes, have {}", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [stem.to_string(), format!("{stem}.gz"), dotted.clone(), format!("{dotted}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST IDX file not found (raw or .gz)"),
    ))
}

fn load_split(dir: &Path, prefix: &str, split: Split) -> Result<LabeledDataset> {
    let img_path = find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lbl_path = find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let img_name = img_path.display().to_string();
    let lbl_name = lbl_path.display().to_string();
    let (n, rows, cols, pixels) = parse_idx_images(&read_all(&img_path)?, &img_name)?;
    let labels = parse_idx_labels(&read_all(&lbl_path)?, &lbl_name)?;
    if labels.len() != n {
        return Err(Error::Parse {
            file: lbl_name,
            offset: 4,
            message: format!("{} labels for {n} images", labels.len()),
        });
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Tensor::new(vec![n, rows * cols], data)?;
    LabeledDataset::new(images, labels, split, MNIST_CLASSES)
}

/// Loads the standard MNIST train and test splits from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((load_split(dir, "train", Split::Train)?, load_split(dir, "t10k", Split::Test)?))
}

/// MNIST directory from `FORGETGATE_DATA_DIR`, if it is set and exists.
pub fn mnist_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .filter(|p| p.is_dir())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSpec {
    pub task_index: usize,
    /// `permutation[j]` is the source pixel of output pixel `j`.
    pub permutation: Vec<usize>,
    /// Seed the shuffle was drawn from (0 for the identity task).
    pub seed: u64,
}

impl PermutationSpec {
    pub fn identity(task_index: usize, n: usize) -> Self {
        Self {
            task_index,
            permutation: (0..n).collect(),
            seed: 0,
        }
    }

    pub fn is_bijection(&self) -> bool {
        let mut sorted = self.permutation.clone();
        sorted.sort_unstable();
        sorted.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.permutation.len()];
        for (j, &src) in self.permutation.iter().enumerate() {
            inv[src] = j;
        }
        Self {
            task_index: self.task_index,
            permutation: inv,
            seed: self.seed,
        }
    }
}

fn fisher_yates(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        p.swap(i, j);
    }
    p
}

/// Permutations over `n_pixels`. Task 0 is the identity; task k is a
/// Fisher–Yates shuffle from a seed derived from `(master_seed, k)`.
pub fn make_permutations_of(n_tasks: usize, n_pixels: usize, master_seed: u64) -> Result<Vec<PermutationSpec>> {
    if n_tasks == 0 {
        return Err(Error::invalid("task count", "need at least one task"));
    }
    Ok((0..n_tasks)
        .map(|k| {
            if k == 0 {
                PermutationSpec::identity(0, n_pixels)
            } else {
                let seed = forgetgate_autodiff::derive_seed(master_seed, &[PERMUTATION_TAG, k as u64]);
                PermutationSpec {
                    task_index: k,
                    permutation: fisher_yates(n_pixels, &mut forgetgate_autodiff::rng_from_seed(seed)),
                    seed,
                }
            }
        })
        .collect())
}

pub fn make_permutations(n_tasks: usize, master_seed: u64) -> Result<Vec<PermutationSpec>> {
    make_permutations_of(n_tasks, MNIST_PIXELS, master_seed)
}

/// `out[i, j] = batch[i, perm[j]]`.
pub fn apply_permutation(batch: &Tensor, spec: &PermutationSpec) -> Result<Tensor> {
    let d = batch.cols();
    if batch.shape().len() != 2 || d != spec.permutation.len() {
        return Err(Error::invalid(
            "permutation",
            format!(
                "batch shape {:?} does not match permutation of {} pixels",
                batch.shape(),
                spec.permutation.len()
            ),
        ));
    }
    let mut out = Tensor::zeros(batch.shape());
    for i in 0..batch.rows() {
        let src = batch.row(i);
        for (o, &p) in out.row_mut(i).iter_mut().zip(&spec.permutation) {
            *o = src[p];
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Outputs are shared across tasks; split-label targets are remapped to
    /// within-task indices.
    Single,
    /// One output per global class; classes outside the task are masked.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    Permuted(Vec<PermutationSpec>),
    SplitLabel(Vec<Vec<u8>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub kind: TaskKind,
    pub head_mode: HeadMode,
    pub n_classes: usize,
}

/// One gathered minibatch for a task.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    /// One-hot over the model outputs.
    pub targets: Tensor,
    pub classes: Vec<usize>,
}

impl TaskSequence {
    pub fn permuted(n_tasks: usize, master_seed: u64) -> Result<Self> {
        Ok(Self {
            kind: TaskKind::Permuted(make_permutations(n_tasks, master_seed)?),
            head_mode: HeadMode::Single,
            n_classes: MNIST_CLASSES,
        })
    }

    pub fn n_tasks(&self) -> usize {
        match &self.kind {
            TaskKind::Permuted(p) => p.len(),
            TaskKind::SplitLabel(s) => s.len(),
        }
    }

    /// Width of the output layer the sequence needs.
    pub fn n_outputs(&self) -> usize {
        match (&self.kind, self.head_mode) {
            (TaskKind::SplitLabel(s), HeadMode::Single) => s.iter().map(Vec::len).max().unwrap_or(0),
            _ => self.n_classes,
        }
    }

    /// Active outputs for `task` in multi-head mode.
    pub fn class_mask(&self, task: usize) -> Option<Vec<bool>> {
        match (&self.kind, self.head_mode) {
            (TaskKind::SplitLabel(s), HeadMode::Multi) => {
                let mut m = vec![false; self.n_classes];
                for &l in &s[task] {
                    m[l as usize] = true;
                }
                Some(m)
            }
            _ => None,
        }
    }

    /// Output index for a dataset label, or `None` if the label is not
    /// part of `task`.
    pub fn target_index(&self, task: usize, label: u8) -> Option<usize> {
        match (&self.kind, self.head_mode) {
            (TaskKind::Permuted(_), _) => Some(label as usize),
            (TaskKind::SplitLabel(s), HeadMode::Single) => s[task].iter().position(|&l| l == label),
            (TaskKind::SplitLabel(s), HeadMode::Multi) => s[task].contains(&label).then_some(label as usize),
        }
    }

    /// Dataset rows that belong to `task`.
    pub fn task_indices(&self, data: &LabeledDataset, task: usize) -> Vec<usize> {
        match &self.kind {
            TaskKind::Permuted(_) => (0..data.len()).collect(),
            TaskKind::SplitLabel(s) => (0..data.len()).filter(|&i| s[task].contains(&data.labels[i])).collect(),
        }
    }

    /// Gathers rows `indices` of `data` as they appear in `task`.
    pub fn batch(&self, data: &LabeledDataset, task: usize, indices: &[usize]) -> Result<Batch> {
        if task >= self.n_tasks() {
            return Err(Error::invalid("task index", format!("{task} >= {}", self.n_tasks())));
        }
        let d = data.input_dim();
        let n_out = self.n_outputs();
        let mut inputs = Tensor::zeros(&[indices.len(), d]);
        let mut targets = Tensor::zeros(&[indices.len(), n_out]);
        let mut classes = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            let src = data.images.row(i);
            match &self.kind {
                TaskKind::Permuted(p) => {
                    let perm = &p[task].permutation;
                    if perm.len() != d {
                        return Err(Error::invalid(
                            "permutation",
                            format!("{} pixels for inputs of width {d}", perm.len()),
                        ));
                    }
                    for (o, &pj) in inputs.row_mut(r).iter_mut().zip(perm) {
                        *o = src[pj];
                    }
                }
                TaskKind::SplitLabel(_) => inputs.row_mut(r).copy_from_slice(src),
            }
            let c = self.target_index(task, data.labels[i]).ok_or_else(|| {
                Error::invalid("batch", format!("label {} is not part of task {task}", data.labels[i]))
            })?;
            targets.set2(r, c, 1.0);
            classes.push(c);
        }
        Ok(Batch {
            inputs,
            targets,
            classes,
        })
    }
}

/// Disjoint label subsets in ascending order: task k gets labels
/// `k·labels_per_task .. (k+1)·labels_per_task`.
pub fn make_split_label_tasks(
    n_tasks: usize,
    labels_per_task: usize,
    n_classes: usize,
    head_mode: HeadMode,
) -> Result<TaskSequence> {
    if n_tasks == 0 || labels_per_task == 0 {
        return Err(Error::invalid("split-label tasks", "need at least one task and one label per task"));
    }
    if n_tasks * labels_per_task > n_classes {
        return Err(Error::invalid(
            "split-label tasks",
            format!("{n_tasks} tasks × {labels_per_task} labels exceeds {n_classes} classes"),
        ));
    }
    let subsets = (0..n_tasks)
        .map(|k| ((k * labels_per_task)..((k + 1) * labels_per_task)).map(|l| l as u8).collect())
        .collect();
    Ok(TaskSequence {
        kind: TaskKind::SplitLabel(subsets),
        head_mode,
        n_classes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_per_class: 100,
            input_dim: MNIST_PIXELS,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Class prototypes shared by both splits of a synthetic dataset.
pub fn synthetic_prototypes(spec: &SyntheticSpec) -> Tensor {
    let mut rng = stream(spec.seed, &[SYNTHETIC_TAG, 0]);
    let mut t = Tensor::zeros(&[spec.n_classes, spec.input_dim]);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (0.5 + 0.25 * z).clamp(0.0, 1.0);
    }
    t
}

/// Gaussian class prototypes plus per-sample noise, clamped to [0, 1].
/// Samples are interleaved by class.
pub fn synthetic_dataset(spec: &SyntheticSpec, split: Split) -> Result<LabeledDataset> {
    if spec.input_dim < spec.n_classes || spec.n_classes == 0 || spec.n_classes > 256 {
        return Err(Error::invalid(
            "synthetic dataset",
            format!("input_dim {} with {} classes", spec.input_dim, spec.n_classes),
        ));
    }
    let protos = synthetic_prototypes(spec);
    let split_tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = stream(spec.seed, &[SYNTHETIC_TAG, split_tag]);
    let n = spec.n_classes * spec.n_per_class;
    let mut images = Tensor::zeros(&[n, spec.input_dim]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.n_classes;
        let proto = protos.row(c);
        for (o, &p) in images.row_mut(i).iter_mut().zip(proto) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o = (p + spec.noise * z).clamp(0.0, 1.0);
        }
        labels.push(c as u8);
    }
    LabeledDataset::new(images, labels, split, spec.n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn image_header_accepted() {
        let bytes = idx_images(2, 2, 2, &[0, 255, 1, 2, 3, 4, 5, 6]);
        let (n, r, c, px) = parse_idx_images(&bytes, "x").unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(px.len(), 8);
    }

    #[test]
    fn label_byte_is_class() {
        let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&1u32.to_be_bytes());
        b.push(7);
        assert_eq!(parse_idx_labels(&b, "l").unwrap(), vec![7]);
    }

    #[test]
    fn corrupt_magic_names_offset_zero() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[..4].copy_from_slice(&0xDEAD_BEEFu32.to_be_bytes());
        match parse_idx_images(&bytes, "img").unwrap_err() {
            Error::Parse { offset, message, .. } => {
                assert_eq!(offset, 0);
                assert!(message.contains("0xdeadbeef"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncated_pixels_rejected() {
        let bytes = idx_images(2, 2, 2, &[0; 5]);
        assert!(matches!(
            parse_idx_images(&bytes, "img"),
            Err(Error::Parse { offset: 21, .. })
        ));
    }

    #[test]
    fn task_zero_is_identity_and_all_are_bijections() {
        let perms = make_permutations(5, 42).unwrap();
        assert_eq!(perms[0].permutation, (0..784).collect::<Vec<_>>());
        assert!(perms.iter().all(PermutationSpec::is_bijection));
        assert_ne!(perms[1].permutation, perms[2].permutation);
    }

    #[test]
    fn permutation_is_deterministic_and_independent_of_predecessors() {
        let a = make_permutations(4, 9).unwrap();
        let b = make_permutations(8, 9).unwrap();
        assert_eq!(a[3], b[3]);
    }

    #[test]
    fn fixed_points_average_near_one() {
        // A uniform random permutation has one fixed point in expectation.
        let perms = make_permutations(101, 5).unwrap();
        let total: usize = perms[1..]
            .iter()
            .map(|p| p.permutation.iter().enumerate().filter(|(i, &v)| *i == v).count())
            .sum();
        let mean = total as f64 / 100.0;
        assert!((0.3..=2.7).contains(&mean), "{mean}");
    }

    #[test]
    fn permutation_then_inverse_restores_batch() {
        let spec = make_permutations_of(3, 6, 1).unwrap().pop().unwrap();
        let batch = Tensor::new(vec![2, 6], (0..12).map(|x| x as f64).collect()).unwrap();
        let p = apply_permutation(&batch, &spec).unwrap();
        assert_eq!(p.row(0).iter().sum::<f64>(), batch.row(0).iter().sum::<f64>());
        assert_eq!(apply_permutation(&p, &spec.inverse()).unwrap(), batch);
        let id = PermutationSpec::identity(0, 6);
        assert_eq!(apply_permutation(&batch, &id).unwrap(), batch);
        assert!(apply_permutation(&Tensor::zeros(&[2, 5]), &spec).is_err());
    }

    #[test]
    fn split_label_partition_and_heads() {
        let seq = make_split_label_tasks(5, 2, 10, HeadMode::Single).unwrap();
        let TaskKind::SplitLabel(s) = &seq.kind else { unreachable!() };
        let mut all: Vec<u8> = s.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<u8>>());
        assert_eq!(s[2], vec![4, 5]);
        assert_eq!(seq.target_index(2, 4), Some(0));
        assert_eq!(seq.target_index(2, 5), Some(1));
        assert_eq!(seq.n_outputs(), 2);

        let multi = make_split_label_tasks(5, 2, 10, HeadMode::Multi).unwrap();
        let mask = multi.class_mask(2).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert_eq!(multi.target_index(2, 5), Some(5));
        assert_eq!(multi.target_index(2, 6), None);

        assert!(make_split_label_tasks(6, 2, 10, HeadMode::Single).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_prototype_separable() {
        let spec = SyntheticSpec {
            n_per_class: 20,
            noise: 0.0,
            ..Default::default()
        };
        let a = synthetic_dataset(&spec, Split::Train).unwrap();
        let b = synthetic_dataset(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        let protos = synthetic_prototypes(&spec);
        for i in 0..a.len() {
            let x = a.images.row(i);
            let nearest = (0..spec.n_classes)
                .min_by(|&p, &q| {
                    let d = |c: usize| protos.row(c).iter().zip(x).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
                    d(p).total_cmp(&d(q))
                })
                .unwrap();
            assert_eq!(nearest, a.labels[i] as usize);
        }
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.class_histogram().iter().all(|&c| c == 20));
    }

    #[test]
    fn synthetic_splits_do_not_share_images() {
        let spec = SyntheticSpec::default();
        let train = synthetic_dataset(&spec, Split::Train).unwrap();
        let test = synthetic_dataset(&spec, Split::Test).unwrap();
        let seen: std::collections::HashSet<u64> = train.content_hashes().into_iter().collect();
        assert!(test.content_hashes().iter().all(|h| !seen.contains(h)));
    }
}

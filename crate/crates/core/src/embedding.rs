//! Embedding containers, experiment manifests and task splits.
//!
//! Container layout (`CEM1`, little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | magic `CEM1` |
//! | 4..8  | u32 version (1) |
//! | 8..12 | u32 dim `M` |
//! | 12..16| u32 class count `K` |
//! | 16..20| u32 record count `N` |
//! | ...   | `K` × (u16 byte length, UTF-8 class name) |
//! | ...   | `N` × (u32 class index, `M` × f32) |
//!
//! Vectors are stored as f32 and widened to f64 on load.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::rng;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CEM1";
pub const EMBEDDING_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub class_index: usize,
    pub vector: DenseVector,
}

/// A labeled set of fixed-dimension embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    class_names: Vec<String>,
    records: Vec<Record>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, class_names: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(class_names.len());
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::contract(format!("duplicate class name {name:?}")));
            }
        }
        for (i, r) in records.iter().enumerate() {
            if r.class_index >= class_names.len() {
                return Err(Error::contract(format!(
                    "record {i}: class index {} out of range for {} classes",
                    r.class_index,
                    class_names.len()
                )));
            }
            if r.vector.dim() != dim {
                return Err(Error::contract(format!(
                    "record {i}: vector dim {} != {dim}",
                    r.vector.dim()
                )));
            }
        }
        Ok(Self {
            dim,
            class_names,
            records,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose class is in `classes`, in file order.
    pub fn filter_classes(&self, classes: &[usize]) -> Vec<&Record> {
        let wanted: HashSet<usize> = classes.iter().copied().collect();
        self.records
            .iter()
            .filter(|r| wanted.contains(&r.class_index))
            .collect()
    }

    /// Interprets the set as text features: one row per class, row `c` = class `c`.
    pub fn text_matrix(&self) -> Result<DenseMatrix> {
        let k = self.num_classes();
        if self.records.len() != k {
            return Err(Error::contract(format!(
                "text set must have exactly one record per class ({k}), found {}",
                self.records.len()
            )));
        }
        let mut rows: Vec<Option<&DenseVector>> = vec![None; k];
        for r in &self.records {
            if rows[r.class_index].replace(&r.vector).is_some() {
                return Err(Error::contract(format!(
                    "text set has two records for class {}",
                    r.class_index
                )));
            }
        }
        let mut data = Vec::with_capacity(k * self.dim);
        for row in rows {
            // every slot filled: k records, no duplicates
            data.extend_from_slice(row.expect("slot filled").as_slice());
        }
        DenseMatrix::from_vec(k, self.dim, data)
    }

    /// Deterministic per-class train/test split by position within each class:
    /// the last `max(1, n/5)` records of a class (n ≥ 2) go to test.
    pub fn split_train_test(&self) -> (EmbeddingSet, EmbeddingSet) {
        let k = self.num_classes();
        let mut counts = vec![0usize; k];
        for r in &self.records {
            counts[r.class_index] += 1;
        }
        let n_train: Vec<usize> = counts
            .iter()
            .map(|&n| if n < 2 { n } else { n - (n / 5).max(1) })
            .collect();
        let mut seen = vec![0usize; k];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for r in &self.records {
            let c = r.class_index;
            if seen[c] < n_train[c] {
                train.push(r.clone());
            } else {
                test.push(r.clone());
            }
            seen[c] += 1;
        }
        (
            EmbeddingSet {
                dim: self.dim,
                class_names: self.class_names.clone(),
                records: train,
            },
            EmbeddingSet {
                dim: self.dim,
                class_names: self.class_names.clone(),
                records: test,
            },
        )
    }

    /// Serializes to the `CEM1` container.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let name_bytes: usize = self.class_names.iter().map(|n| 2 + n.len()).sum();
        let mut out =
            Vec::with_capacity(HEADER_LEN + name_bytes + self.records.len() * (4 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(self.dim, "dim")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.class_names.len(), "class count")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.records.len(), "record count")?.to_le_bytes());
        for name in &self.class_names {
            let len = u16::try_from(name.len()).map_err(|_| {
                Error::contract(format!("class name longer than 65535 bytes: {name:?}"))
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for (i, r) in self.records.iter().enumerate() {
            out.extend_from_slice(&to_u32(r.class_index, "class index")?.to_le_bytes());
            for &x in r.vector.as_slice() {
                let f = x as f32;
                if !f.is_finite() {
                    return Err(Error::contract(format!(
                        "record {i} has a non-finite entry ({x})"
                    )));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4, "magic")?;
        if magic != EMBEDDING_MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}, expected \"CEM1\"", lossy(magic))));
        }
        let version = cur.u32("header")?;
        if version != EMBEDDING_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dim = cur.u32("header")? as usize;
        let k = cur.u32("header")? as usize;
        let n = cur.u32("header")? as usize;

        let mut class_names = Vec::with_capacity(k.min(1 << 16));
        let mut seen = HashSet::new();
        for c in 0..k {
            let at = cur.pos;
            let len = cur.u16("class table")? as usize;
            let raw = cur.take(len, "class table")?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::format(at + 2, format!("class name {c} is not valid UTF-8")))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(Error::format(at, format!("duplicate class name {name:?}")));
            }
            class_names.push(name);
        }

        let record_len = 4 + 4 * dim;
        if bytes.len() - cur.pos < n.saturating_mul(record_len) {
            let have = (bytes.len() - cur.pos) / record_len.max(1);
            return Err(Error::format(
                cur.pos + have * record_len,
                format!("truncated records section: header promises {n} records, file holds {have}"),
            ));
        }
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let at = cur.pos;
            let class_index = cur.u32("records")? as usize;
            if class_index >= k {
                return Err(Error::format(
                    at,
                    format!("record {i}: class index {class_index} out of range for {k} classes"),
                ));
            }
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let at = cur.pos;
                let x = f32::from_le_bytes(cur.array("records")?);
                if !x.is_finite() {
                    return Err(Error::format(at, format!("record {i}: non-finite value {x}")));
                }
                v.push(f64::from(x));
            }
            records.push(Record {
                class_index,
                vector: DenseVector::new(v),
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(
                cur.pos,
                format!("{} trailing bytes after last record", bytes.len() - cur.pos),
            ));
        }
        Ok(Self {
            dim,
            class_names,
            records,
        })
    }
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::contract(format!("{what} {x} does not fit in u32")))
}

fn lossy(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Byte reader that reports offsets and the section being read on truncation.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos,
                format!(
                    "truncated {section}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub(crate) fn array<const N: usize>(&mut self, section: &str) -> Result<[u8; N]> {
        let s = self.take(N, section)?;
        Ok(s.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self, section: &str) -> Result<u8> {
        Ok(self.array::<1>(section)?[0])
    }

    pub(crate) fn u16(&mut self, section: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(section)?))
    }

    pub(crate) fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(section)?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingSet::from_bytes(&bytes)
}

pub fn write_embedding_file(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = set.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// All classes divided equally among tasks.
    B0,
    /// First task holds ⌈K/2⌉ classes, the rest are divided equally.
    B50,
}

/// Binds embedding files into an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Either one file (split 80/20 per class) or `[train, test]`.
    pub image_embeddings: Vec<String>,
    pub text_embeddings: String,
    pub split: Split,
    pub num_tasks: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_order: Option<Vec<usize>>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf);
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::config("num_tasks must be at least 1"));
        }
        if !(1..=2).contains(&self.image_embeddings.len()) {
            return Err(Error::config(
                "image_embeddings must list one file or [train, test]",
            ));
        }
        if let Some(order) = &self.class_order {
            check_permutation(order)?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn check_permutation(order: &[usize]) -> Result<()> {
    let mut seen = vec![false; order.len()];
    for &c in order {
        if c >= order.len() || std::mem::replace(&mut seen[c], true) {
            return Err(Error::config(format!(
                "class_order is not a permutation of 0..{}",
                order.len()
            )));
        }
    }
    Ok(())
}

/// Per-task class sizes for `k` classes, or a configuration error when the
/// split does not divide evenly.
pub fn task_sizes(split: Split, num_tasks: usize, k: usize) -> Result<Vec<usize>> {
    if num_tasks == 0 {
        return Err(Error::config("num_tasks must be at least 1"));
    }
    match split {
        Split::B0 => {
            if k < num_tasks || k % num_tasks != 0 {
                return Err(Error::config(format!(
                    "B0 split: {k} classes cannot be divided equally into {num_tasks} tasks"
                )));
            }
            Ok(vec![k / num_tasks; num_tasks])
        }
        Split::B50 => {
            let first = k.div_ceil(2);
            let rest = k - first;
            let incr = num_tasks - 1;
            if incr == 0 {
                if rest != 0 {
                    return Err(Error::config(format!(
                        "B50 split with one task leaves {rest} of {k} classes unassigned"
                    )));
                }
                return Ok(vec![first]);
            }
            if rest < incr || rest % incr != 0 {
                return Err(Error::config(format!(
                    "B50 split: remaining {rest} classes cannot be divided equally into {incr} tasks"
                )));
            }
            let mut sizes = vec![first];
            sizes.extend(std::iter::repeat_n(rest / incr, incr));
            Ok(sizes)
        }
    }
}

/// The class order a manifest implies: explicit, or a seeded shuffle of `0..k`.
pub fn class_order(manifest: &Manifest, k: usize) -> Result<Vec<usize>> {
    match &manifest.class_order {
        Some(order) => {
            if order.len() != k {
                return Err(Error::config(format!(
                    "class_order has {} entries but the dataset has {k} classes",
                    order.len()
                )));
            }
            check_permutation(order)?;
            Ok(order.clone())
        }
        None => {
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng::stream(manifest.seed, "class_order"));
            Ok(order)
        }
    }
}

/// Partitions the `k` classes into tasks.
pub fn split_tasks(manifest: &Manifest, k: usize) -> Result<Vec<Vec<usize>>> {
    let sizes = task_sizes(manifest.split, manifest.num_tasks, k)?;
    let order = class_order(manifest, k)?;
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for s in sizes {
        tasks.push(order[at..at + s].to_vec());
        at += s;
    }
    Ok(tasks)
}

/// Train, test and text sets for one experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
    pub text: EmbeddingSet,
}

impl Dataset {
    pub fn new(train: EmbeddingSet, test: EmbeddingSet, text: EmbeddingSet) -> Result<Self> {
        for (what, s) in [("test", &test), ("text", &text)] {
            if s.class_names() != train.class_names() {
                return Err(Error::config(format!(
                    "{what} embeddings have a different class table than train"
                )));
            }
            if s.dim() != train.dim() {
                return Err(Error::config(format!(
                    "{what} embeddings have dim {} but train has {}",
                    s.dim(),
                    train.dim()
                )));
            }
        }
        text.text_matrix()?;
        Ok(Self { train, test, text })
    }

    pub fn load(manifest: &Manifest) -> Result<Self> {
        manifest.validate()?;
        let text = read_embedding_file(manifest.resolve(&manifest.text_embeddings))?;
        let (train, test) = match manifest.image_embeddings.as_slice() {
            [one] => read_embedding_file(manifest.resolve(one))?.split_train_test(),
            [train, test] => (
                read_embedding_file(manifest.resolve(train))?,
                read_embedding_file(manifest.resolve(test))?,
            ),
            _ => unreachable!("validated above"),
        };
        Self::new(train, test, text)
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }
}

//! Class prototypes: local computation, server-side aggregation, padding,
//! and similarity analysis.
//!
//! A prototype is the mean projected embedding of one class on one client.
//! The server aggregates local prototypes into a global set and pads each
//! client's set so every class is covered before it is sent back down.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm, Matrix};

/// Who produced a prototype set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Client(usize),
    Global,
}

impl std::fmt::Display for Owner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Owner::Client(i) => write!(f, "client{i}"),
            Owner::Global => write!(f, "global"),
        }
    }
}

/// One class entry: the representative vector, the number of samples that
/// built it, and whether it was padded in from the global set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoEntry {
    pub vector: Vec<f64>,
    pub count: usize,
    pub padded: bool,
}

/// Class-indexed prototype vectors. Entries iterate in ascending class id,
/// which fixes every downstream summation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub owner: Owner,
    entries: BTreeMap<usize, ProtoEntry>,
}

impl PrototypeSet {
    pub fn new(owner: Owner) -> Self {
        PrototypeSet {
            owner,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class: usize, entry: ProtoEntry) {
        self.entries.insert(class, entry);
    }

    pub fn get(&self, class: usize) -> Option<&ProtoEntry> {
        self.entries.get(&class)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &ProtoEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&usize, &mut ProtoEntry)> {
        self.entries.iter_mut()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.vector.len())
    }

    /// Sorted class ids alongside a matrix whose row `r` is the prototype of
    /// the `r`-th class. Convenient form for the loss kernels.
    pub fn aligned(&self) -> (Vec<usize>, Matrix) {
        let classes = self.classes();
        let dim = self.dim().unwrap_or(0);
        let mut m = Matrix::zeros(classes.len(), dim);
        for (r, c) in classes.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&self.entries[c].vector);
        }
        (classes, m)
    }
}

/// Per-class mean of the projected batch rows (one entry per class present).
pub fn compute_local_prototypes(z: &Matrix, labels: &[usize], owner: Owner) -> Result<PrototypeSet> {
    if z.rows() == 0 || labels.is_empty() {
        return Err(Error::Data("cannot compute prototypes from an empty batch".into()));
    }
    if z.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows vs {} labels",
            z.rows(),
            labels.len()
        )));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let (sum, count) = sums
            .entry(y)
            .or_insert_with(|| (vec![0.0; z.cols()], 0));
        for (s, v) in sum.iter_mut().zip(z.row(i)) {
            *s += v;
        }
        *count += 1;
    }
    let mut set = PrototypeSet::new(owner);
    for (class, (sum, count)) in sums {
        let vector = sum.iter().map(|s| s / count as f64).collect();
        set.insert(
            class,
            ProtoEntry {
                vector,
                count,
                padded: false,
            },
        );
    }
    Ok(set)
}

/// How the server combines local prototypes of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Count-weighted sum divided by the number of owning clients. Shrinks
    /// with the owner count; kept as the default for fidelity to the
    /// aggregation rule it realizes.
    AsWritten,
    /// Count-weighted sum only (a convex combination of the local vectors).
    WeightedMean,
}

/// Server aggregation of local prototype sets into the global set. Padded
/// entries never participate; classes nobody owns are simply absent from
/// the output. Summation runs in ascending client order.
pub fn aggregate_global(local_sets: &[PrototypeSet], mode: AggregationMode) -> Result<PrototypeSet> {
    if local_sets.is_empty() {
        return Err(Error::Data("aggregate_global needs at least one set".into()));
    }
    let dim = local_sets
        .iter()
        .find_map(|s| s.dim())
        .ok_or_else(|| Error::Data("all local sets are empty".into()))?;
    for s in local_sets {
        if let Some(d) = s.dim() {
            if d != dim {
                return Err(Error::Shape(format!("prototype dims {d} vs {dim}")));
            }
        }
    }

    let mut classes: Vec<usize> = local_sets
        .iter()
        .flat_map(|s| s.classes())
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut global = PrototypeSet::new(Owner::Global);
    for class in classes {
        let owners: Vec<&ProtoEntry> = local_sets
            .iter()
            .filter_map(|s| s.get(class))
            .filter(|e| !e.padded)
            .collect();
        if owners.is_empty() {
            continue;
        }
        let total: usize = owners.iter().map(|e| e.count).sum();
        let mut vector = vec![0.0; dim];
        for entry in &owners {
            let w = entry.count as f64 / total as f64;
            for (acc, v) in vector.iter_mut().zip(&entry.vector) {
                *acc += w * v;
            }
        }
        if mode == AggregationMode::AsWritten {
            let scale = 1.0 / owners.len() as f64;
            for v in &mut vector {
                *v *= scale;
            }
        }
        global.insert(
            class,
            ProtoEntry {
                vector,
                count: total,
                padded: false,
            },
        );
    }
    Ok(global)
}

/// Fills each client's missing classes with the global prototype (marked
/// padded, count 0) so every returned set covers the same class list.
pub fn pad_local_sets(local_sets: &[PrototypeSet], global: &PrototypeSet) -> Result<Vec<PrototypeSet>> {
    for s in local_sets {
        for class in s.classes() {
            if s.get(class).map(|e| !e.padded).unwrap_or(false) && global.get(class).is_none() {
                return Err(Error::Data(format!(
                    "global set missing class {class} owned by {}",
                    s.owner
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(local_sets.len());
    for s in local_sets {
        let mut padded = PrototypeSet::new(s.owner);
        for (&class, gentry) in global.iter() {
            match s.get(class) {
                Some(e) if !e.padded => padded.insert(class, e.clone()),
                _ => padded.insert(
                    class,
                    ProtoEntry {
                        vector: gentry.vector.clone(),
                        count: 0,
                        padded: true,
                    },
                ),
            }
        }
        out.push(padded);
    }
    Ok(out)
}

/// Pairwise inner products between two prototype sets, with row/column
/// labels naming the owning set and class.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Matrix,
}

pub fn similarity_matrix(a: &PrototypeSet, b: &PrototypeSet, normalize: bool) -> Result<SimilarityMatrix> {
    let da = a.dim().ok_or_else(|| Error::Data("empty prototype set".into()))?;
    let db = b.dim().ok_or_else(|| Error::Data("empty prototype set".into()))?;
    if da != db {
        return Err(Error::Shape(format!("prototype dims {da} vs {db}")));
    }
    let prep = |v: &[f64]| -> Vec<f64> {
        if normalize {
            let n = l2_norm(v);
            if n > 0.0 {
                return v.iter().map(|x| x / n).collect();
            }
        }
        v.to_vec()
    };
    let ra: Vec<(String, Vec<f64>)> = a
        .iter()
        .map(|(c, e)| (format!("{}:{}", a.owner, c), prep(&e.vector)))
        .collect();
    let rb: Vec<(String, Vec<f64>)> = b
        .iter()
        .map(|(c, e)| (format!("{}:{}", b.owner, c), prep(&e.vector)))
        .collect();
    let mut values = Matrix::zeros(ra.len(), rb.len());
    for (i, (_, va)) in ra.iter().enumerate() {
        for (j, (_, vb)) in rb.iter().enumerate() {
            values.set(i, j, dot(va, vb));
        }
    }
    Ok(SimilarityMatrix {
        row_labels: ra.into_iter().map(|(l, _)| l).collect(),
        col_labels: rb.into_iter().map(|(l, _)| l).collect(),
        values,
    })
}

impl SimilarityMatrix {
    /// CSV with a labeled header row and a label column, LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("label");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, r) in self.row_labels.iter().enumerate() {
            out.push_str(r);
            for j in 0..self.col_labels.len() {
                out.push(',');
                out.push_str(&format!("{}", self.values.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ProtoFileHeader {
    owner: Owner,
    dim: usize,
    classes: Vec<usize>,
    counts: Vec<usize>,
    padded: Vec<bool>,
}

/// Writes a prototype set: one JSON header line, then the vectors in
/// class-sorted order as little-endian `f32`.
pub fn save_prototype_set(set: &PrototypeSet, path: &Path) -> Result<()> {
    let dim = set.dim().ok_or_else(|| Error::Data("empty prototype set".into()))?;
    let header = ProtoFileHeader {
        owner: set.owner,
        dim,
        classes: set.classes(),
        counts: set.iter().map(|(_, e)| e.count).collect(),
        padded: set.iter().map(|(_, e)| e.padded).collect(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for (_, e) in set.iter() {
        for &v in &e.vector {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_prototype_set(path: &Path) -> Result<PrototypeSet> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: ProtoFileHeader = serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Format {
        offset: 0,
        message: format!("bad prototype header: {e}"),
    })?;
    if header.classes.len() != header.counts.len() || header.classes.len() != header.padded.len() {
        return Err(Error::Format {
            offset: 0,
            message: "header class/count/flag lists disagree".into(),
        });
    }
    let mut set = PrototypeSet::new(header.owner);
    let mut offset = header_line.len() as u64;
    for ((&class, &count), &padded) in header
        .classes
        .iter()
        .zip(&header.counts)
        .zip(&header.padded)
    {
        let mut buf = vec![0u8; header.dim * 4];
        reader.read_exact(&mut buf).map_err(|_| Error::Format {
            offset,
            message: format!("truncated vector for class {class}"),
        })?;
        let vector: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        offset += (header.dim * 4) as u64;
        set.insert(class, ProtoEntry { vector, count, padded });
    }
    Ok(set)
}

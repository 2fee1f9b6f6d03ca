//! Embedding datasets and non-IID partitioning.
//!
//! A dataset row is the concatenation of K frozen-backbone embeddings for
//! one sample (backbone 1 first, then 2, ... K), with a class label, a
//! domain tag, and a train/test split tag. The synthetic generator mimics
//! that layout with Gaussian clusters; real exported features can be
//! ingested through the same file format.
//!
//! On-disk format (`.fpcl`): magic "FPCL", version as little-endian u16,
//! one JSON header line, then the embedding matrix as little-endian `f32`,
//! row-major. Values are quantized to `f32` at generation time so the file
//! round-trip is the identity; computation upcasts to `f64` on load.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dirichlet_sample, Matrix, Rng};

pub const DATASET_MAGIC: &[u8; 4] = b"FPCL";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Concatenated-embedding dataset with labels, domain tags, and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub k: usize,
    pub d_e: usize,
    pub n_classes: usize,
    pub n_domains: usize,
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub split: Vec<Split>,
}

impl EmbeddingDataset {
    pub fn n(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.k * self.d_e
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == Split::Train).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == Split::Test).collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if self.embeddings.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding cols {} != K*d_e = {}",
                self.embeddings.cols(),
                self.dim()
            )));
        }
        if self.labels.len() != n || self.domains.len() != n || self.split.len() != n {
            return Err(Error::Shape("label/domain/split lengths disagree".into()));
        }
        if self.labels.iter().any(|&y| y >= self.n_classes) {
            return Err(Error::Data("label out of range".into()));
        }
        if self.domains.iter().any(|&d| d >= self.n_domains) {
            return Err(Error::Data("domain out of range".into()));
        }
        if !self.embeddings.is_finite() {
            return Err(Error::Numerical("dataset embeddings contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Synthetic stand-in for pre-extracted backbone features: one Gaussian
/// cluster per (domain, class) cell in `R^(K*d_e)`.
///
/// Class means are random Gaussian points rescaled so the minimum pairwise
/// distance is exactly `class_sep`; each domain adds a random offset of norm
/// `domain_shift`. The last fifth of every cell (rounded down) is tagged as
/// test data.
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic(
    rng: &mut Rng,
    n_domains: usize,
    n_classes: usize,
    k: usize,
    d_e: usize,
    samples_per_cell: usize,
    class_sep: f64,
    domain_shift: f64,
) -> Result<EmbeddingDataset> {
    if n_domains == 0 || n_classes == 0 || k == 0 || d_e == 0 || samples_per_cell == 0 {
        return Err(Error::Param("all synthetic-dataset counts must be >= 1".into()));
    }
    if !(class_sep > 0.0) || domain_shift < 0.0 {
        return Err(Error::Param(format!(
            "need class_sep > 0 and domain_shift >= 0, got {class_sep} / {domain_shift}"
        )));
    }
    let dim = k * d_e;

    let mut class_means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.standard_gaussian()).collect())
        .collect();
    if n_classes > 1 {
        let mut min_dist = f64::INFINITY;
        for a in 0..n_classes {
            for b in a + 1..n_classes {
                let d2: f64 = class_means[a]
                    .iter()
                    .zip(&class_means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                min_dist = min_dist.min(d2.sqrt());
            }
        }
        if min_dist <= 0.0 {
            return Err(Error::Numerical("coincident class means".into()));
        }
        let scale = class_sep / min_dist;
        for m in &mut class_means {
            for v in m {
                *v *= scale;
            }
        }
    }

    let domain_offsets: Vec<Vec<f64>> = (0..n_domains)
        .map(|_| {
            if domain_shift == 0.0 {
                return vec![0.0; dim];
            }
            let v: Vec<f64> = (0..dim).map(|_| rng.standard_gaussian()).collect();
            let norm = crate::linalg::l2_norm(&v);
            v.iter().map(|x| domain_shift * x / norm).collect()
        })
        .collect();

    let n = n_domains * n_classes * samples_per_cell;
    let n_test_per_cell = samples_per_cell / 5;
    let mut embeddings = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let mut row = 0;
    for domain in 0..n_domains {
        for class in 0..n_classes {
            for s in 0..samples_per_cell {
                let out = embeddings.row_mut(row);
                for (j, o) in out.iter_mut().enumerate() {
                    let v = class_means[class][j] + domain_offsets[domain][j] + rng.standard_gaussian();
                    // Quantize to f32 so the file round-trip is exact.
                    *o = v as f32 as f64;
                }
                labels.push(class);
                domains.push(domain);
                split.push(if s >= samples_per_cell - n_test_per_cell {
                    Split::Test
                } else {
                    Split::Train
                });
                row += 1;
            }
        }
    }
    let ds = EmbeddingDataset {
        k,
        d_e,
        n_classes,
        n_domains,
        embeddings,
        labels,
        domains,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-client train/test sample indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl PartitionAssignment {
    pub fn n_clients(&self) -> usize {
        self.train.len()
    }
}

fn indices_by_class(dataset: &EmbeddingDataset, pool: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by_class.entry(dataset.labels[i]).or_default().push(i);
    }
    by_class
}

/// One domain per client; every class present with equal train counts
/// (subsampled to the global per-class minimum among the used domains).
pub fn partition_feature_shift(dataset: &EmbeddingDataset, m: usize) -> Result<PartitionAssignment> {
    if m == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if dataset.n_domains < m {
        return Err(Error::Config(format!(
            "feature shift needs >= {m} domains, dataset has {}",
            dataset.n_domains
        )));
    }
    let mut per_client_class: Vec<BTreeMap<usize, Vec<usize>>> = Vec::with_capacity(m);
    let mut test = Vec::with_capacity(m);
    for client in 0..m {
        let domain_train: Vec<usize> = dataset
            .train_indices()
            .into_iter()
            .filter(|&i| dataset.domains[i] == client)
            .collect();
        let domain_test: Vec<usize> = dataset
            .test_indices()
            .into_iter()
            .filter(|&i| dataset.domains[i] == client)
            .collect();
        let by_class = indices_by_class(dataset, &domain_train);
        if by_class.len() != dataset.n_classes {
            return Err(Error::Config(format!(
                "domain {client} is missing classes ({} of {})",
                by_class.len(),
                dataset.n_classes
            )));
        }
        per_client_class.push(by_class);
        test.push(domain_test);
    }
    let min_count = per_client_class
        .iter()
        .flat_map(|bc| bc.values().map(|v| v.len()))
        .min()
        .unwrap_or(0);
    if min_count == 0 {
        return Err(Error::Config("a (domain, class) cell has no train samples".into()));
    }
    let train = per_client_class
        .into_iter()
        .map(|bc| {
            let mut shard: Vec<usize> = bc.values().flat_map(|v| v[..min_count].to_vec()).collect();
            shard.sort_unstable();
            shard
        })
        .collect();
    Ok(PartitionAssignment { train, test })
}

const PARTITION_RETRY_CAP: usize = 100;

/// Splits each class across clients in Dirichlet(alpha) proportions with
/// largest-remainder rounding (ties to the lower client id). The same draw
/// allocates the class's test samples, so each client's test distribution
/// mirrors its train skew. Redraws until every client holds at least one
/// train and one test sample.
pub fn partition_label_shift(
    dataset: &EmbeddingDataset,
    m: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<PartitionAssignment> {
    if m == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Param(format!("alpha must be > 0, got {alpha}")));
    }
    let train_by_class = indices_by_class(dataset, &dataset.train_indices());
    let test_by_class = indices_by_class(dataset, &dataset.test_indices());
    for attempt in 0..PARTITION_RETRY_CAP {
        let mut train: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut test: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (&class, idxs) in &train_by_class {
            let p = dirichlet_sample(rng, alpha, m)?;
            let counts = largest_remainder(&p, idxs.len());
            let mut cursor = 0;
            for (client, &c) in counts.iter().enumerate() {
                train[client].extend_from_slice(&idxs[cursor..cursor + c]);
                cursor += c;
            }
            if let Some(tidx) = test_by_class.get(&class) {
                let tcounts = largest_remainder(&p, tidx.len());
                let mut cursor = 0;
                for (client, &c) in tcounts.iter().enumerate() {
                    test[client].extend_from_slice(&tidx[cursor..cursor + c]);
                    cursor += c;
                }
            }
        }
        if train.iter().all(|t| !t.is_empty()) && test.iter().all(|t| !t.is_empty()) {
            for t in train.iter_mut().chain(test.iter_mut()) {
                t.sort_unstable();
            }
            return Ok(PartitionAssignment { train, test });
        }
        let _ = attempt;
    }
    Err(Error::PartitionInfeasible {
        retries: PARTITION_RETRY_CAP,
        message: format!("alpha={alpha} left a client empty in every draw"),
    })
}

/// Domain-per-client assignment, then a per-client Dirichlet skew over the
/// class histogram inside that domain. Test shards keep the whole domain.
pub fn partition_feature_label_shift(
    dataset: &EmbeddingDataset,
    m: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<PartitionAssignment> {
    if m == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if dataset.n_domains < m {
        return Err(Error::Config(format!(
            "feature & label shift needs >= {m} domains, dataset has {}",
            dataset.n_domains
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Param(format!("alpha must be > 0, got {alpha}")));
    }
    let mut train: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut test: Vec<Vec<usize>> = Vec::with_capacity(m);
    for client in 0..m {
        let domain_train: Vec<usize> = dataset
            .train_indices()
            .into_iter()
            .filter(|&i| dataset.domains[i] == client)
            .collect();
        let domain_test: Vec<usize> = dataset
            .test_indices()
            .into_iter()
            .filter(|&i| dataset.domains[i] == client)
            .collect();
        if domain_train.is_empty() {
            return Err(Error::Config(format!("domain {client} has no train samples")));
        }
        let by_class = indices_by_class(dataset, &domain_train);
        let classes: Vec<usize> = by_class.keys().copied().collect();
        let q = dirichlet_sample(rng, alpha, classes.len())?;
        let desired = largest_remainder(&q, domain_train.len());
        let mut shard = Vec::new();
        for (ci, &class) in classes.iter().enumerate() {
            let available = &by_class[&class];
            let take = desired[ci].min(available.len());
            shard.extend_from_slice(&available[..take]);
        }
        if shard.is_empty() {
            // All mass landed on classes with no capacity; keep at least one
            // sample so the client participates.
            shard.push(domain_train[0]);
        }
        shard.sort_unstable();
        train.push(shard);
        test.push(domain_test);
    }
    Ok(PartitionAssignment { train, test })
}

/// Largest-remainder apportionment of `total` into `p.len()` parts; ties on
/// the fractional part go to the lower index.
fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(p.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(p.len());
    let mut assigned = 0usize;
    for (i, &pi) in p.iter().enumerate() {
        let exact = pi * total as f64;
        let floor = exact.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((exact - floor as f64, i));
    }
    let mut leftover = total.saturating_sub(assigned);
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for (_, i) in remainders {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    k: usize,
    d_e: usize,
    n_classes: usize,
    n_domains: usize,
    n_train: usize,
    n_test: usize,
    labels: Vec<usize>,
    domains: Vec<usize>,
    split: Vec<u8>,
}

pub fn save_dataset(dataset: &EmbeddingDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let header = DatasetHeader {
        n: dataset.n(),
        k: dataset.k,
        d_e: dataset.d_e,
        n_classes: dataset.n_classes,
        n_domains: dataset.n_domains,
        n_train: dataset.train_indices().len(),
        n_test: dataset.test_indices().len(),
        labels: dataset.labels.clone(),
        domains: dataset.domains.clone(),
        split: dataset
            .split
            .iter()
            .map(|s| if *s == Split::Train { 0u8 } else { 1u8 })
            .collect(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DATASET_MAGIC)?;
    f.write_all(&DATASET_VERSION.to_le_bytes())?;
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for &v in dataset.embeddings.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        message: "file shorter than magic".into(),
    })?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"),
        });
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version).map_err(|_| Error::Format {
        offset: 4,
        message: "missing version".into(),
    })?;
    let version = u16::from_le_bytes(version);
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: DatasetHeader = serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Format {
        offset: 6,
        message: format!("bad header: {e}"),
    })?;
    if header.n == 0 {
        return Err(Error::Data("dataset file declares zero samples".into()));
    }
    let dim = header.k * header.d_e;
    let payload_offset = 6 + header_line.len() as u64;
    let mut buf = vec![0u8; header.n * dim * 4];
    reader.read_exact(&mut buf).map_err(|_| Error::Format {
        offset: payload_offset,
        message: format!("truncated embedding payload (expected {} bytes)", buf.len()),
    })?;
    let data: Vec<f64> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let ds = EmbeddingDataset {
        k: header.k,
        d_e: header.d_e,
        n_classes: header.n_classes,
        n_domains: header.n_domains,
        embeddings: Matrix::from_vec(header.n, dim, data)?,
        labels: header.labels,
        domains: header.domains,
        split: header
            .split
            .iter()
            .map(|&b| if b == 0 { Split::Train } else { Split::Test })
            .collect(),
    };
    ds.validate().map_err(|e| match e {
        Error::Data(m) | Error::Shape(m) => Error::Format {
            offset: 6,
            message: m,
        },
        other => other,
    })?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset(rng: &mut Rng) -> EmbeddingDataset {
        generate_synthetic(rng, 2, 4, 2, 3, 20, 8.0, 2.0).unwrap()
    }

    #[test]
    fn synthetic_deterministic() {
        let a = generate_synthetic(&mut Rng::new(1), 2, 3, 1, 4, 10, 5.0, 1.0).unwrap();
        let b = generate_synthetic(&mut Rng::new(1), 2, 3, 1, 4, 10, 5.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_zero_domain_shift_shares_class_means() {
        let ds = generate_synthetic(&mut Rng::new(2), 3, 2, 1, 4, 100, 6.0, 0.0).unwrap();
        // Per-class empirical means should agree across domains up to
        // sampling noise (same underlying cluster center).
        for class in 0..2 {
            let mut means = Vec::new();
            for domain in 0..3 {
                let rows: Vec<usize> = (0..ds.n())
                    .filter(|&i| ds.labels[i] == class && ds.domains[i] == domain)
                    .collect();
                let mut mean = vec![0.0; ds.dim()];
                for &r in &rows {
                    for (m, v) in mean.iter_mut().zip(ds.embeddings.row(r)) {
                        *m += v / rows.len() as f64;
                    }
                }
                means.push(mean);
            }
            for d in 1..3 {
                let dist: f64 = means[0]
                    .iter()
                    .zip(&means[d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist < 0.75, "class {class}: domain means {dist} apart");
            }
        }
    }

    #[test]
    fn synthetic_separable_by_nearest_class_mean() {
        let ds = generate_synthetic(&mut Rng::new(3), 1, 10, 3, 8, 50, 20.0, 0.0).unwrap();
        // Nearest-class-mean on the raw embeddings, trained on the train
        // split, scored on the test split.
        let train = ds.train_indices();
        let test = ds.test_indices();
        let mut means: Vec<Vec<f64>> = vec![vec![0.0; ds.dim()]; 10];
        let mut counts = vec![0usize; 10];
        for &i in &train {
            counts[ds.labels[i]] += 1;
            for (m, v) in means[ds.labels[i]].iter_mut().zip(ds.embeddings.row(i)) {
                *m += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m {
                *v /= c as f64;
            }
        }
        let mut correct = 0usize;
        for &i in &test {
            let mut best = (f64::INFINITY, 0usize);
            for (class, m) in means.iter().enumerate() {
                let d2: f64 = m
                    .iter()
                    .zip(ds.embeddings.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < best.0 {
                    best = (d2, class);
                }
            }
            if best.1 == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.99, "nearest-class-mean accuracy {acc}");
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        assert!(generate_synthetic(&mut Rng::new(1), 0, 2, 1, 2, 5, 1.0, 0.0).is_err());
        assert!(generate_synthetic(&mut Rng::new(1), 1, 2, 1, 2, 5, 0.0, 0.0).is_err());
    }

    #[test]
    fn feature_shift_partition_properties() {
        let mut rng = Rng::new(4);
        let ds = small_dataset(&mut rng);
        let pa = partition_feature_shift(&ds, 2).unwrap();
        // Single domain per client.
        for (client, shard) in pa.train.iter().enumerate() {
            assert!(shard.iter().all(|&i| ds.domains[i] == client));
            // Equal per-class counts within the shard.
            let by_class = indices_by_class(&ds, shard);
            let counts: Vec<usize> = by_class.values().map(|v| v.len()).collect();
            assert_eq!(by_class.len(), ds.n_classes);
            assert!(counts.windows(2).all(|w| w[0] == w[1]));
        }
        // Equal sizes, pairwise disjoint.
        assert_eq!(pa.train[0].len(), pa.train[1].len());
        let mut all: Vec<usize> = pa.train.iter().flatten().copied().collect();
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(before, all.len());
    }

    #[test]
    fn feature_shift_needs_enough_domains() {
        let mut rng = Rng::new(5);
        let ds = small_dataset(&mut rng);
        assert!(matches!(
            partition_feature_shift(&ds, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn label_shift_partition_is_exhaustive_and_disjoint() {
        let mut rng = Rng::new(6);
        let ds = generate_synthetic(&mut rng, 1, 5, 1, 4, 40, 6.0, 0.0).unwrap();
        let pa = partition_label_shift(&ds, 4, 0.5, &mut rng).unwrap();
        let mut all: Vec<usize> = pa.train.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, ds.train_indices());
        let mut t: Vec<usize> = pa.test.iter().flatten().copied().collect();
        t.sort_unstable();
        assert_eq!(t, ds.test_indices());
    }

    #[test]
    fn label_shift_uniform_for_huge_alpha() {
        let mut rng = Rng::new(7);
        let ds = generate_synthetic(&mut rng, 1, 4, 1, 3, 100, 6.0, 0.0).unwrap();
        for _ in 0..20 {
            let pa = partition_label_shift(&ds, 4, 1e6, &mut rng).unwrap();
            for shard in &pa.train {
                let by_class = indices_by_class(&ds, shard);
                for idxs in by_class.values() {
                    // 80 train per class over 4 clients -> about 20 each.
                    let frac = idxs.len() as f64 / shard.len() as f64;
                    assert!((frac - 0.25).abs() < 0.025, "class fraction {frac}");
                }
            }
        }
    }

    #[test]
    fn label_shift_skews_for_small_alpha() {
        let mut rng = Rng::new(8);
        let ds = generate_synthetic(&mut rng, 1, 5, 1, 3, 50, 6.0, 0.0).unwrap();
        let mut saw_dominant = false;
        for seed in 0..20 {
            let mut prng = Rng::new(seed);
            let pa = partition_label_shift(&ds, 5, 0.5, &mut prng).unwrap();
            for shard in &pa.train {
                let by_class = indices_by_class(&ds, shard);
                if by_class.values().any(|v| v.len() * 2 > shard.len()) {
                    saw_dominant = true;
                }
            }
        }
        assert!(saw_dominant, "alpha=0.5 never produced a dominant class");
    }

    #[test]
    fn feature_label_shift_composition() {
        let mut rng = Rng::new(9);
        let ds = generate_synthetic(&mut rng, 3, 6, 1, 4, 60, 6.0, 2.0).unwrap();
        let pa = partition_feature_label_shift(&ds, 3, 0.5, &mut rng).unwrap();
        let mut any_skewed = false;
        for (client, shard) in pa.train.iter().enumerate() {
            assert!(shard.iter().all(|&i| ds.domains[i] == client));
            let by_class = indices_by_class(&ds, shard);
            let counts: Vec<usize> = by_class.values().map(|v| v.len()).collect();
            if counts.iter().max() != counts.iter().min() {
                any_skewed = true;
            }
        }
        assert!(any_skewed, "no client histogram was skewed at alpha=0.5");
    }

    #[test]
    fn feature_label_shift_large_alpha_approaches_feature_shift() {
        let mut rng = Rng::new(10);
        let ds = generate_synthetic(&mut rng, 2, 4, 1, 3, 100, 6.0, 1.0).unwrap();
        let pa = partition_feature_label_shift(&ds, 2, 1e6, &mut rng).unwrap();
        for shard in &pa.train {
            let by_class = indices_by_class(&ds, shard);
            assert_eq!(by_class.len(), ds.n_classes);
            for idxs in by_class.values() {
                let frac = idxs.len() as f64 / shard.len() as f64;
                assert!((frac - 0.25).abs() < 0.03, "class fraction {frac}");
            }
        }
    }

    #[test]
    fn partitioners_reproducible() {
        let mut rng = Rng::new(11);
        let ds = generate_synthetic(&mut rng, 2, 4, 1, 3, 30, 6.0, 1.0).unwrap();
        let a = partition_label_shift(&ds, 3, 0.5, &mut Rng::new(77)).unwrap();
        let b = partition_label_shift(&ds, 3, 0.5, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
        let c = partition_feature_label_shift(&ds, 2, 0.5, &mut Rng::new(78)).unwrap();
        let d = partition_feature_label_shift(&ds, 2, 0.5, &mut Rng::new(78)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn largest_remainder_sums_and_ties() {
        let counts = largest_remainder(&[0.5, 0.25, 0.25], 10);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert_eq!(counts, vec![5, 3, 2]); // tie on 0.5 goes to lower index
        let counts = largest_remainder(&[1.0 / 3.0; 3], 100);
        assert_eq!(counts.iter().sum::<usize>(), 100);
    }

    #[test]
    fn dirichlet_proportions_consistency() {
        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let k = 2 + rng.next_below(6) as usize;
            let p = dirichlet_sample(&mut rng, 0.7, k).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let total = 1 + rng.next_below(500) as usize;
            let counts = largest_remainder(&p, total);
            assert_eq!(counts.iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn dataset_roundtrip_identity() {
        let mut rng = Rng::new(13);
        let ds = small_dataset(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.fpcl");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn dataset_truncation_is_format_error() {
        let mut rng = Rng::new(14);
        let ds = small_dataset(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.fpcl");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fpcl");
        std::fs::write(&path, b"NOPE\x01\x00{}\n").unwrap();
        let err = load_dataset(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dataset_zero_samples_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fpcl");
        let header = serde_json::json!({
            "n": 0, "k": 1, "d_e": 2, "n_classes": 1, "n_domains": 1,
            "n_train": 0, "n_test": 0, "labels": [], "domains": [], "split": []
        });
        let mut bytes = Vec::new();
        bytes.extend_from_slice(DATASET_MAGIC);
        bytes.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        bytes.extend_from_slice(header.to_string().as_bytes());
        bytes.push(b'\n');
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Data(_))));
    }
}

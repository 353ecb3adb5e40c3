//! Datasets, uniform partitioning, the Bernoulli allocation matrix and
//! mini-batch sampling.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg, Error, Result};
use crate::rng::{StreamKey, StreamRng};

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// Row-major sample matrix with integer class labels.
///
/// Features sit behind an `Arc` so label-remapped views share storage with the
/// original.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Arc<Vec<f64>>,
    labels: Arc<Vec<u32>>,
    dim: usize,
    classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u32>,
        dim: usize,
        classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return arg("dataset must contain at least one sample");
        }
        if dim == 0 || classes == 0 {
            return arg("feature dimension and class count must be positive");
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Consistency(format!(
                "{} feature values for {} labels of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return arg(format!("label {bad} outside [0, {classes})"));
        }
        Ok(Dataset {
            features: Arc::new(features),
            labels: Arc::new(labels),
            dim,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Same features, labels replaced by `map(y)`.
    pub fn relabeled(&self, map: impl Fn(u32) -> u32, name: impl Into<String>) -> Self {
        Dataset {
            features: Arc::clone(&self.features),
            labels: Arc::new(self.labels.iter().map(|&y| map(y)).collect()),
            dim: self.dim,
            classes: self.classes,
            name: name.into(),
        }
    }

    /// Keep only samples whose label is in `keep`, relabeling them to their
    /// position in `keep`. Optionally truncates to the first `limit` samples.
    pub fn select_classes(&self, keep: &[u32], limit: Option<usize>) -> Result<Self> {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if let Some(pos) = keep.iter().position(|&c| c == self.labels[i]) {
                feats.extend_from_slice(self.row(i));
                labels.push(pos as u32);
                if limit.is_some_and(|l| labels.len() >= l) {
                    break;
                }
            }
        }
        Dataset::new(feats, labels, self.dim, keep.len(), format!("{}-subset", self.name))
    }
}

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("{what}: truncated header"),
            ))
        })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn truncated(what: &str, want: usize, got: usize) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("{what}: expected {want} payload bytes, found {got}"),
    ))
}

/// Parse an IDX image/label file pair (big-endian headers, unsigned bytes).
/// Pixels are scaled to `[0, 1]` by dividing by 255.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let magic = read_u32_be(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images file has magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let magic = read_u32_be(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels file has magic {magic}, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let n_images = read_u32_be(images, 4, "images")? as usize;
    let rows = read_u32_be(images, 8, "images")? as usize;
    let cols = read_u32_be(images, 12, "images")? as usize;
    let n_labels = read_u32_be(labels, 4, "labels")? as usize;
    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < n_images * dim {
        return Err(truncated("images", n_images * dim, pixels.len()));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(truncated("labels", n_labels, label_bytes.len()));
    }
    let features = pixels[..n_images * dim]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels = label_bytes[..n_labels].iter().map(|&y| y as u32).collect();
    Dataset::new(features, labels, dim, 10, name)
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_all(images_path)?;
    let labels = read_all(labels_path)?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mnist".into());
    parse_mnist_idx(&images, &labels, &name)
}

/// Class means of the synthetic blobs. Two classes sit at
/// `±separation/(2√f)·1`; more classes use the scaled simplex `separation/√2 · e_c`,
/// which needs `dim ≥ classes`.
pub fn synthetic_means(classes: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if classes < 2 || dim == 0 || separation <= 0.0 || !separation.is_finite() {
        return arg("synthetic data needs classes >= 2, dim >= 1 and separation > 0");
    }
    if classes == 2 {
        // along the all-ones diagonal so every feature carries signal
        let h = separation / (2.0 * (dim as f64).sqrt());
        return Ok(vec![vec![-h; dim], vec![h; dim]]);
    }
    if dim < classes {
        return arg(format!("{classes} classes need at least {classes} features"));
    }
    let scale = separation / std::f64::consts::SQRT_2;
    Ok((0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            m[c] = scale;
            m
        })
        .collect())
}

/// Unit-covariance Gaussian blobs, one per class, samples interleaved by class.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if per_class == 0 {
        return arg("per_class must be at least 1");
    }
    let means = synthetic_means(classes, dim, separation)?;
    let mut rng = StreamKey::new(seed).derive("synthetic", &[]).rng();
    let n = classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + z);
            }
            labels.push(c as u32);
        }
    }
    Dataset::new(
        features,
        labels,
        dim,
        classes,
        format!("synthetic-c{classes}-n{per_class}-f{dim}"),
    )
}

/// `K` disjoint index blocks of equal size `⌊N/K⌋`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    subsets: Vec<Vec<usize>>,
}

impl Partition {
    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn subset(&self, i: usize) -> &[usize] {
        &self.subsets[i]
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// Common subset size `D`.
    pub fn subset_size(&self) -> usize {
        self.subsets.first().map_or(0, Vec::len)
    }
}

/// Seeded shuffle of `[0, N)` cut into `K` consecutive blocks. The trailing
/// `N mod K` shuffled samples are dropped.
pub fn partition(dataset: &Dataset, k: usize, seed: u64) -> Result<Partition> {
    partition_indices(dataset.len(), k, StreamKey::new(seed).derive("partition", &[]))
}

pub fn partition_indices(n: usize, k: usize, key: StreamKey) -> Result<Partition> {
    if k == 0 {
        return arg("K must be at least 1");
    }
    if n < k {
        return arg(format!("cannot split {n} samples into {k} subsets"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut key.rng());
    let d = n / k;
    let subsets = order.chunks_exact(d).take(k).map(<[usize]>::to_vec).collect();
    Ok(Partition { subsets })
}

/// Binary `K×K` data-allocation matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix {
    k: usize,
    p: f64,
    entries: Vec<bool>,
}

impl AllocationMatrix {
    pub fn identity(k: usize) -> Self {
        let mut entries = vec![false; k * k];
        for i in 0..k {
            entries[i * k + i] = true;
        }
        AllocationMatrix { k, p: 0.0, entries }
    }

    /// Build from explicit rows; the diagonal must be set.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return arg("allocation matrix must be square");
        }
        if (0..k).any(|i| !rows[i][i]) {
            return arg("allocation matrix diagonal must be all ones");
        }
        let ones = rows.iter().flatten().filter(|&&b| b).count() - k;
        let p = if k > 1 { ones as f64 / (k * (k - 1)) as f64 } else { 0.0 };
        Ok(AllocationMatrix { k, p, entries: rows.concat() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.entries[row * self.k + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.entries[row * self.k..(row + 1) * self.k]
    }

    /// Number of off-diagonal ones in `row`.
    pub fn redundancy(&self, row: usize) -> usize {
        self.row(row).iter().filter(|&&b| b).count() - 1
    }

    /// Fraction of off-diagonal entries equal to one.
    pub fn off_diagonal_density(&self) -> f64 {
        if self.k < 2 {
            return 0.0;
        }
        let ones: usize = (0..self.k).map(|r| self.redundancy(r)).sum();
        ones as f64 / (self.k * (self.k - 1)) as f64
    }
}

pub fn generate_allocation(k: usize, p: f64, seed: u64) -> Result<AllocationMatrix> {
    allocation_from_stream(k, p, StreamKey::new(seed).derive("allocation", &[]))
}

pub fn allocation_from_stream(k: usize, p: f64, key: StreamKey) -> Result<AllocationMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return arg(format!("allocation probability {p} outside [0, 1]"));
    }
    if k == 0 {
        return arg("K must be at least 1");
    }
    let mut rng = key.rng();
    let mut entries = vec![false; k * k];
    for r in 0..k {
        for c in 0..k {
            entries[r * k + c] = r == c || rng.random_bool(p);
        }
    }
    Ok(AllocationMatrix { k, p, entries })
}

/// Index sets `S_k = { i : E_ki = 1 }` for every worker.
pub fn assigned_sets(e: &AllocationMatrix) -> Vec<Vec<usize>> {
    (0..e.k())
        .map(|r| {
            e.row(r)
                .iter()
                .enumerate()
                .filter_map(|(i, &on)| on.then_some(i))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub subset: usize,
    pub indices: Vec<usize>,
}

/// `batch` distinct dataset indices drawn uniformly from subset `i`.
pub fn sample_minibatch(
    partition: &Partition,
    i: usize,
    batch: usize,
    rng: &mut StreamRng,
) -> Result<MiniBatch> {
    let subset = partition
        .subsets
        .get(i)
        .ok_or_else(|| Error::Argument(format!("subset {i} out of range")))?;
    if batch > subset.len() {
        return arg(format!(
            "batch size {batch} exceeds subset size {}",
            subset.len()
        ));
    }
    let indices = rand::seq::index::sample(rng, subset.len(), batch)
        .into_iter()
        .map(|j| subset[j])
        .collect();
    Ok(MiniBatch { subset: i, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn idx_images(n: u32, rows: u32, cols: u32, magic: u32) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [magic, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        v
    }

    fn idx_labels(n: u32, magic: u32) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&magic.to_be_bytes());
        v.extend_from_slice(&n.to_be_bytes());
        v.extend((0..n).map(|i| (i % 10) as u8));
        v
    }

    #[test]
    fn idx_parses_and_scales() {
        let ds = parse_mnist_idx(&idx_images(3, 2, 2, 2051), &idx_labels(3, 2049), "t").unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.classes()), (3, 4, 10));
        assert_eq!(ds.row(0), &[0.0, 1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0]);
        assert_eq!(ds.label(2), 2);
    }

    #[test]
    fn idx_rejects_wrong_label_magic() {
        let err = parse_mnist_idx(&idx_images(3, 2, 2, 2051), &idx_labels(3, 2051), "t");
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let err = parse_mnist_idx(&idx_images(100, 2, 2, 2051), &idx_labels(99, 2049), "t");
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn idx_truncated_is_io_error() {
        let mut imgs = idx_images(4, 2, 2, 2051);
        imgs.truncate(imgs.len() - 3);
        let err = parse_mnist_idx(&imgs, &idx_labels(4, 2049), "t");
        assert!(matches!(err, Err(Error::Io(_))));
        let err = parse_mnist_idx(&imgs[..10], &idx_labels(4, 2049), "t");
        assert!(matches!(err, Err(Error::Io(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(2, 500, 10, 4.0, 7).unwrap();
        let b = generate_synthetic(2, 500, 10, 4.0, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        let ones = a.labels().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 500);
        assert!(generate_synthetic(1, 5, 3, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 5, 0, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 5, 3, 0.0, 0).is_err());
    }

    #[test]
    fn simplex_means_are_equidistant() {
        let m = synthetic_means(4, 6, 3.0).unwrap();
        for a in 0..4 {
            for b in (a + 1)..4 {
                let d: f64 = m[a].iter().zip(&m[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!((d.sqrt() - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_drops_remainder() {
        let ds = generate_synthetic(2, 5, 2, 1.0, 0).unwrap();
        let p = partition(&ds, 3, 11).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.subsets().iter().all(|s| s.len() == 3));
        assert_eq!(p, partition(&ds, 3, 11).unwrap());
        assert!(partition(&ds, 11, 0).is_err());
        assert!(partition(&ds, 0, 0).is_err());
    }

    #[test]
    fn mnist_sized_partition() {
        let p = partition_indices(60_000, 50, StreamKey::new(3)).unwrap();
        assert!(p.subsets().iter().all(|s| s.len() == 1200));
    }

    #[test]
    fn allocation_extremes() {
        assert_eq!(generate_allocation(6, 0.0, 1).unwrap().entries, AllocationMatrix::identity(6).entries);
        let full = generate_allocation(4, 1.0, 1).unwrap();
        assert!(full.entries.iter().all(|&b| b));
        assert!(generate_allocation(4, 1.5, 1).is_err());
        assert!(generate_allocation(4, -0.1, 1).is_err());
    }

    #[test]
    fn allocation_density_over_seeds() {
        let mean: f64 = (0..1000)
            .map(|s| generate_allocation(50, 0.1, s).unwrap().off_diagonal_density())
            .sum::<f64>()
            / 1000.0;
        assert!((0.095..=0.105).contains(&mean), "mean density {mean}");
    }

    #[test]
    fn assigned_sets_follow_rows() {
        let id = AllocationMatrix::identity(3);
        assert_eq!(assigned_sets(&id), vec![vec![0], vec![1], vec![2]]);
        let ones = generate_allocation(3, 1.0, 0).unwrap();
        assert!(assigned_sets(&ones).iter().all(|s| s == &vec![0, 1, 2]));
        let e = AllocationMatrix::from_rows(&[
            vec![true, false, true, false],
            vec![false, true, false, false],
            vec![false, false, true, false],
            vec![true, true, true, true],
        ])
        .unwrap();
        assert_eq!(assigned_sets(&e)[0], vec![0, 2]);
        assert!(AllocationMatrix::from_rows(&[vec![false]]).is_err());
    }

    #[test]
    fn minibatch_edges() {
        let p = partition_indices(20, 2, StreamKey::new(0)).unwrap();
        let mut rng = StreamKey::new(5).rng();
        let full = sample_minibatch(&p, 1, 10, &mut rng).unwrap();
        let mut sorted = full.indices.clone();
        sorted.sort_unstable();
        let mut expect = p.subset(1).to_vec();
        expect.sort_unstable();
        assert_eq!(sorted, expect);
        assert_eq!(sample_minibatch(&p, 0, 1, &mut rng).unwrap().indices.len(), 1);
        assert!(sample_minibatch(&p, 0, 11, &mut rng).is_err());
        let a = sample_minibatch(&p, 0, 4, &mut StreamKey::new(9).rng()).unwrap();
        let b = sample_minibatch(&p, 0, 4, &mut StreamKey::new(9).rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn redundancy_matches_binomial() {
        use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};
        let (k, p) = (10usize, 0.3);
        let mut counts = vec![0usize; k];
        let mut total = 0usize;
        for seed in 0..2000 {
            let e = generate_allocation(k, p, seed).unwrap();
            for r in 0..k {
                counts[e.redundancy(r)] += 1;
                total += 1;
            }
        }
        let binom = Binomial::new(p, (k - 1) as u64).unwrap();
        // pool tails so every expected count is at least 5
        let mut observed = Vec::new();
        let mut expected = Vec::new();
        let (mut o_acc, mut e_acc) = (0.0, 0.0);
        for n in 0..k {
            o_acc += counts[n] as f64;
            e_acc += binom.pmf(n as u64) * total as f64;
            if e_acc >= 5.0 && (n + 1..k).map(|m| binom.pmf(m as u64) * total as f64).sum::<f64>() >= 5.0 {
                observed.push(o_acc);
                expected.push(e_acc);
                o_acc = 0.0;
                e_acc = 0.0;
            }
        }
        observed.push(o_acc);
        expected.push(e_acc);
        let stat: f64 = observed
            .iter()
            .zip(&expected)
            .map(|(o, e)| (o - e).powi(2) / e)
            .sum();
        let crit = ChiSquared::new((observed.len() - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn diagonal_always_set(k in 1usize..40, p in 0.0f64..=1.0, seed in any::<u64>()) {
            let e = generate_allocation(k, p, seed).unwrap();
            prop_assert!((0..k).all(|i| e.get(i, i)));
            let sets = assigned_sets(&e);
            for (r, s) in sets.iter().enumerate() {
                prop_assert!(s.contains(&r));
                prop_assert_eq!(s.len(), 1 + e.redundancy(r));
            }
        }

        #[test]
        fn partition_blocks_disjoint(n in 1usize..500, k in 1usize..40, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let p = partition_indices(n, k, StreamKey::new(seed)).unwrap();
            let mut seen = HashSet::new();
            for s in p.subsets() {
                prop_assert_eq!(s.len(), n / k);
                for &i in s {
                    prop_assert!(i < n);
                    prop_assert!(seen.insert(i));
                }
            }
        }

        #[test]
        fn minibatch_distinct_and_in_subset(seed in any::<u64>(), a in 1usize..=12) {
            let p = partition_indices(50, 4, StreamKey::new(seed)).unwrap();
            let mb = sample_minibatch(&p, 2, a, &mut StreamKey::new(seed ^ 1).rng()).unwrap();
            let uniq: HashSet<_> = mb.indices.iter().collect();
            prop_assert_eq!(uniq.len(), a);
            prop_assert!(mb.indices.iter().all(|i| p.subset(2).contains(i)));
        }
    }
}

//! Classification datasets: synthetic generation, CSV ingestion, stratified
//! 8:1:1 splitting and federated partitioning (IID, Dirichlet label skew,
//! pathological shards).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n x d`, one sample per row.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    /// Validated constructor: labels in range, `n >= 1`, every class present.
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::contract("dataset must contain at least one sample"));
        }
        if features.rows() != labels.len() {
            return Err(Error::contract("feature rows and label count differ"));
        }
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::contract(format!("label {l} out of range 0..{num_classes}")));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::contract(format!("class {missing} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order. Class coverage is not required.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Matrix::from_vec(indices.len(), d, data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Writes the CSV format accepted by [`load_csv`].
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(&label.to_string());
            for v in self.features.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Balanced class-conditional Gaussian clusters: class `c` has mean
/// `margin * u_c` for a random unit vector `u_c`, and identity covariance.
pub fn gen_synthetic(rng: &mut Rng, n: usize, d: usize, classes: usize, margin: f64) -> Result<Dataset> {
    if classes < 2 || d < classes {
        return Err(Error::contract(format!(
            "synthetic data needs classes >= 2 and d >= classes (d={d}, classes={classes})"
        )));
    }
    if n < classes {
        return Err(Error::contract("n must be at least the number of classes"));
    }
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        centers.push(v.into_iter().map(|x| margin * x / norm).collect::<Vec<_>>());
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * d);
    for &l in &labels {
        for c in &centers[l] {
            data.push(c + rng.normal());
        }
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, classes)
}

/// Reads `label,f1,f2,...` rows. Lines starting with `#` are skipped.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if record.len() < 2 {
            return Err(bad("expected a label and at least one feature".into()));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| bad(format!("label {:?} is not a non-negative integer", &record[0])))?;
        let width = record.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(w) if w != width => {
                return Err(bad(format!("row has {width} features, expected {w}")));
            }
            _ => {}
        }
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| bad(format!("feature {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(bad(format!("feature {field:?} is not finite")));
            }
            data.push(v);
        }
        labels.push(label);
    }
    let Some(dim) = dim else {
        return Err(Error::Parse {
            line: 0,
            message: "no samples".into(),
        });
    };
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, num_classes)
}

/// Index sets of an 8:1:1 train/validation/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Non-fatal notes, e.g. a fallback to unstratified splitting.
    pub warnings: Vec<String>,
}

const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Stratified 8:1:1 split. Per-class sizes are within one of the exact
/// ratio and global sizes are `round(0.8n)`, `round(0.1n)` and the rest.
pub fn split(dataset: &Dataset, rng: &mut Rng) -> Result<Split> {
    let n = dataset.len();
    if n < 10 {
        return Err(Error::contract(format!("split needs n >= 10, got {n}")));
    }
    let mut warnings = Vec::new();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        strata[l].push(i);
    }
    if let Some(c) = strata.iter().position(|s| s.len() < 3) {
        warnings.push(format!(
            "class {c} has fewer than 3 samples; falling back to an unstratified split"
        ));
        strata = vec![(0..n).collect()];
    }
    for s in &mut strata {
        rng.shuffle(s);
    }

    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let targets = [n_train, n_val, n - n_train - n_val];

    // floor of each exact share, then hand out leftovers by largest remainder
    let mut counts: Vec<[usize; 3]> = Vec::with_capacity(strata.len());
    let mut rems = Vec::new();
    for (c, s) in strata.iter().enumerate() {
        let mut row = [0; 3];
        for k in 0..3 {
            let q = s.len() as f64 * SPLIT_RATIOS[k];
            row[k] = q.floor() as usize;
            rems.push((q - q.floor(), c, k));
        }
        counts.push(row);
    }
    let mut leftover: Vec<usize> = strata
        .iter()
        .zip(&counts)
        .map(|(s, row)| s.len() - row.iter().sum::<usize>())
        .collect();
    let mut deficit: Vec<usize> = (0..3)
        .map(|k| targets[k] - counts.iter().map(|r| r[k]).sum::<usize>())
        .collect();
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, c, k) in &rems {
        if leftover[c] > 0 && deficit[k] > 0 {
            counts[c][k] += 1;
            leftover[c] -= 1;
            deficit[k] -= 1;
        }
    }
    for c in 0..strata.len() {
        while leftover[c] > 0 {
            let k = (0..3).find(|&k| deficit[k] > 0).expect("deficits cover leftovers");
            counts[c][k] += 1;
            leftover[c] -= 1;
            deficit[k] -= 1;
        }
    }

    let mut out = Split {
        train: Vec::with_capacity(targets[0]),
        val: Vec::with_capacity(targets[1]),
        test: Vec::with_capacity(targets[2]),
        warnings,
    };
    for (s, row) in strata.iter().zip(&counts) {
        out.train.extend_from_slice(&s[..row[0]]);
        out.val.extend_from_slice(&s[row[0]..row[0] + row[1]]);
        out.test.extend_from_slice(&s[row[0] + row[1]..]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    /// Per-client label mixtures drawn from `Dir(alpha * 1)`.
    Dirichlet { alpha: f64 },
    /// Sort-and-deal shards: the label-sorted samples are cut into
    /// `labels_per_client * num_clients` single-label shards and each client
    /// is dealt `labels_per_client` of them.
    Pathological { labels_per_client: usize },
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub num_clients: usize,
    pub seed: u64,
}

const MAX_PARTITION_ATTEMPTS: u64 = 100;

/// Splits the rows of `train` into `num_clients` disjoint, non-empty shards
/// whose union is every row.
pub fn partition(train: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = train.len();
    let k = spec.num_clients;
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "cannot partition {n} samples across {k} clients"
        )));
    }
    match spec.scheme {
        Scheme::Dirichlet { alpha } if !(alpha > 0.0) => {
            return Err(Error::contract("Dirichlet alpha must be > 0"));
        }
        Scheme::Pathological { labels_per_client } if !(1..=2).contains(&labels_per_client) => {
            return Err(Error::contract("labels_per_client must be 1 or 2"));
        }
        _ => {}
    }
    let root = Rng::new(spec.seed);
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = root.fork(attempt);
        let shards = match spec.scheme {
            Scheme::Iid => iid(n, k, &mut rng),
            Scheme::Pathological { labels_per_client } => {
                pathological(train, k, labels_per_client, &mut rng)
            }
            Scheme::Dirichlet { alpha } => dirichlet(train, k, alpha, &mut rng),
        };
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
    }
    Err(Error::contract(format!(
        "could not give every client a sample after {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

fn even_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn iid(n: usize, k: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut out = Vec::with_capacity(k);
    let mut offset = 0;
    for size in even_sizes(n, k) {
        out.push(idx[offset..offset + size].to_vec());
        offset += size;
    }
    out
}

fn pathological(train: &Dataset, k: usize, per_client: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut idx);
    idx.sort_by_key(|&i| train.labels[i]);
    let num_shards = per_client * k;
    let mut shards: Vec<&[usize]> = Vec::with_capacity(num_shards);
    let mut groups: Vec<&[usize]> = idx.chunk_by(|&a, &b| train.labels[a] == train.labels[b]).collect();
    if num_shards >= groups.len() {
        // label-pure shards: every label gets at least one, the rest by size
        let mut alloc = vec![1usize; groups.len()];
        let spare = num_shards - groups.len();
        let n = idx.len() as f64;
        let mut rems: Vec<(f64, usize)> = Vec::with_capacity(groups.len());
        let mut given = 0;
        for (g, group) in groups.iter().enumerate() {
            let q = spare as f64 * group.len() as f64 / n;
            alloc[g] += q.floor() as usize;
            given += q.floor() as usize;
            rems.push((q - q.floor(), g));
        }
        rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, g) in rems.iter().take(spare - given) {
            alloc[g] += 1;
        }
        for (group, count) in groups.drain(..).zip(alloc) {
            let mut offset = 0;
            for size in even_sizes(group.len(), count) {
                shards.push(&group[offset..offset + size]);
                offset += size;
            }
        }
    } else {
        let mut offset = 0;
        for size in even_sizes(idx.len(), num_shards) {
            shards.push(&idx[offset..offset + size]);
            offset += size;
        }
    }
    let mut order: Vec<usize> = (0..num_shards).collect();
    rng.shuffle(&mut order);
    order
        .chunks(per_client)
        .map(|ids| ids.iter().flat_map(|&s| shards[s].iter().copied()).collect())
        .collect()
}

fn dirichlet(train: &Dataset, k: usize, alpha: f64, rng: &mut Rng) -> Vec<Vec<usize>> {
    let classes = train.num_classes;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in train.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in &mut pools {
        rng.shuffle(p);
    }
    let mut out = Vec::with_capacity(k);
    for size in even_sizes(train.len(), k) {
        let mix = rng.dirichlet(alpha, classes);
        let mut shard = Vec::with_capacity(size);
        for _ in 0..size {
            let total: f64 = (0..classes).filter(|&c| !pools[c].is_empty()).map(|c| mix[c]).sum();
            let label = if total > 0.0 {
                let mut u = rng.uniform() * total;
                let mut chosen = None;
                for c in (0..classes).filter(|&c| !pools[c].is_empty()) {
                    chosen = Some(c);
                    if u < mix[c] {
                        break;
                    }
                    u -= mix[c];
                }
                chosen.expect("a non-empty pool exists")
            } else {
                // the mixture has no mass on any remaining label
                let open: Vec<usize> = (0..classes).filter(|&c| !pools[c].is_empty()).collect();
                open[rng.below(open.len())]
            };
            shard.push(pools[label].pop().expect("chosen pool is non-empty"));
        }
        out.push(shard);
    }
    out
}

/// Shannon entropy (nats) of a label histogram.
pub fn label_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mean per-client label entropy of a partition.
pub fn mean_client_entropy(train: &Dataset, shards: &[Vec<usize>]) -> f64 {
    shards
        .iter()
        .map(|s| label_entropy(&train.class_counts(s)))
        .sum::<f64>()
        / shards.len() as f64
}

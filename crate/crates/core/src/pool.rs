//! Offline pool construction, D1/D2 partitioning, the RBF similarity index,
//! and the SFT/RL pairing datasets.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{Design, DesignKey, NormalizationSpec, SpaceKind, TaskSpec};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubSampling {
    Even,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Similar,
    Random,
}

#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub design: Design,
    pub label: f64,
    pub norm: f64,
}

/// Label-sorted, sub-sampled set of labeled designs.
#[derive(Clone, Debug)]
pub struct OfflinePool {
    pub entries: Vec<PoolEntry>,
    /// Size of the dataset the pool was drawn from.
    pub source_size: usize,
}

impl OfflinePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.label)
    }

    /// Highest normalized label in the pool.
    pub fn best_norm(&self) -> f64 {
        self.entries.last().map(|e| e.norm).unwrap_or(f64::NAN)
    }
}

/// Even sub-sampling index schedule over a sorted dataset of size `n_total`.
pub fn even_indices(n_total: usize, n_pool: usize) -> Vec<usize> {
    (0..n_pool)
        .map(|k| ((k as f64) * ((n_total - 1) as f64) / ((n_pool - 1) as f64)).round() as usize)
        .collect()
}

/// Sorts the dataset by label and selects `n_pool` entries, either evenly
/// spaced over the sorted order or uniformly without replacement.
pub fn build_pool(
    dataset: &[(Design, f64)],
    n_pool: usize,
    norm: &NormalizationSpec,
    mode: SubSampling,
    seed: u64,
) -> Result<OfflinePool> {
    let n_total = dataset.len();
    if n_pool < 2 {
        return Err(Error::Capacity(format!("n_pool must be >= 2, got {n_pool}")));
    }
    if n_total < n_pool {
        return Err(Error::Capacity(format!(
            "dataset has {n_total} entries, need at least n_pool={n_pool}"
        )));
    }
    for (design, y) in dataset {
        if !y.is_finite() {
            return Err(Error::Range(format!("non-finite label for {design}")));
        }
    }

    let mut order: Vec<usize> = (0..n_total).collect();
    order.sort_by(|&a, &b| dataset[a].1.total_cmp(&dataset[b].1).then(a.cmp(&b)));

    let selected: Vec<usize> = match mode {
        SubSampling::Even => {
            let schedule = even_indices(n_total, n_pool);
            let mut used = HashSet::with_capacity(n_pool);
            let mut keys: HashSet<DesignKey> = HashSet::with_capacity(n_pool);
            let mut out = Vec::with_capacity(n_pool);
            for idx in schedule {
                let mut idx = idx;
                // Rounding collisions and duplicate designs both resolve by
                // taking the next unused index upward.
                loop {
                    if idx >= n_total {
                        return Err(Error::Capacity(
                            "even sub-sampling ran out of unused indices".into(),
                        ));
                    }
                    let key = dataset[order[idx]].0.dedup_key();
                    if !used.contains(&idx) && !keys.contains(&key) {
                        used.insert(idx);
                        keys.insert(key);
                        break;
                    }
                    idx += 1;
                }
                out.push(idx);
            }
            out.sort_unstable();
            out
        }
        SubSampling::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pool-random"));
            let mut keys: HashSet<DesignKey> = HashSet::with_capacity(n_pool);
            let mut picked: HashSet<usize> = HashSet::with_capacity(n_pool);
            let mut out = Vec::with_capacity(n_pool);
            let mut attempts = 0usize;
            while out.len() < n_pool {
                attempts += 1;
                if attempts > 100 * n_pool.max(1) {
                    return Err(Error::Capacity(
                        "random sub-sampling could not find enough distinct designs".into(),
                    ));
                }
                let idx = rng.random_range(0..n_total);
                if picked.contains(&idx) {
                    continue;
                }
                let key = dataset[order[idx]].0.dedup_key();
                if keys.contains(&key) {
                    continue;
                }
                picked.insert(idx);
                keys.insert(key);
                out.push(idx);
            }
            out.sort_unstable();
            out
        }
    };

    let entries = selected
        .into_iter()
        .map(|idx| {
            let (design, label) = &dataset[order[idx]];
            PoolEntry { design: design.clone(), label: *label, norm: norm.normalize(*label) }
        })
        .collect();
    Ok(OfflinePool { entries, source_size: n_total })
}

/// Disjoint index split of a sorted pool: lower-label share and upper-label
/// remainder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub d1: Vec<usize>,
    pub d2: Vec<usize>,
}

pub fn build_partition(pool: &OfflinePool, ratio: f64) -> Result<Partition> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Range(format!("ratio must be in (0,1), got {ratio}")));
    }
    let n = pool.len();
    let cut = (ratio * n as f64).floor() as usize;
    if cut == 0 || cut == n {
        return Err(Error::Capacity(format!(
            "partition of {n} entries at ratio {ratio} leaves an empty side"
        )));
    }
    Ok(Partition { d1: (0..cut).collect(), d2: (cut..n).collect() })
}

/// Standardized feature table plus the median-distance RBF bandwidth.
#[derive(Clone, Debug)]
pub struct SimilarityIndex {
    features: Vec<Vec<f64>>,
    pub sigma: f64,
}

pub fn build_similarity_index(pool: &OfflinePool, task: &TaskSpec) -> Result<SimilarityIndex> {
    let n = pool.len();
    if n < 2 {
        return Err(Error::Shape("similarity index needs at least 2 entries".into()));
    }
    let mut features: Vec<Vec<f64>> = pool
        .entries
        .iter()
        .map(|e| raw_features(task, &e.design))
        .collect();
    let dim = features[0].len();

    // Feature-wise standardization; zero-variance dimensions pass through
    // unscaled (centered only).
    for d in 0..dim {
        let mean = features.iter().map(|f| f[d]).sum::<f64>() / n as f64;
        let var = features.iter().map(|f| (f[d] - mean) * (f[d] - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for f in features.iter_mut() {
            f[d] -= mean;
            if std > 0.0 {
                f[d] /= std;
            }
        }
    }

    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(&features[i], &features[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let sigma = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if sigma <= 0.0 {
        return Err(Error::Degenerate(
            "median pairwise distance is zero; features are indistinct".into(),
        ));
    }
    Ok(SimilarityIndex { features, sigma })
}

/// One-hot position logits for discrete designs; raw values for continuous.
fn raw_features(task: &TaskSpec, design: &Design) -> Vec<f64> {
    match (task.kind, design) {
        (SpaceKind::Discrete, Design::Discrete(symbols)) => {
            let a = task.alphabet.len();
            let mut f = vec![0.0; task.length * a];
            for (i, &s) in symbols.iter().enumerate() {
                f[i * a + s] = 1.0;
            }
            f
        }
        (SpaceKind::Continuous, Design::Continuous(values)) => values.clone(),
        _ => unreachable!("pool entries conform to the task"),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl SimilarityIndex {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// RBF kernel value in (0, 1].
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        let d2 = sq_dist(&self.features[i], &self.features[j]);
        (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// The `k` entries of `candidates` most similar to `target`, ties broken
    /// by lower pool index. Returned sorted ascending by pool index.
    pub fn top_similar(&self, target: usize, k: usize, candidates: &[usize]) -> Vec<usize> {
        let mut ranked: Vec<usize> = candidates.to_vec();
        ranked.sort_by(|&a, &b| {
            let da = sq_dist(&self.features[a], &self.features[target]);
            let db = sq_dist(&self.features[b], &self.features[target]);
            da.total_cmp(&db).then(a.cmp(&b))
        });
        ranked.truncate(k);
        ranked.sort_unstable();
        ranked
    }
}

/// One prompt-response pairing into the pool: context entries, a target, an
/// optional reward, and the template that renders it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub context: Vec<usize>,
    pub target: usize,
    pub reward: Option<f64>,
    pub template: usize,
}

/// Builds the supervised pairing: targets from D2, context from D1 by top
/// similarity (or uniformly in `Random` mode), templates round-robin.
pub fn build_sft_pairs(
    pool: &OfflinePool,
    partition: &Partition,
    index: &SimilarityIndex,
    n_few: usize,
    n_pairs: usize,
    template_count: usize,
    mode: ContextMode,
    seed: u64,
) -> Result<Vec<PairSpec>> {
    if partition.d1.len() < n_few {
        return Err(Error::Capacity(format!(
            "need n_few={n_few} context entries, D1 has {}",
            partition.d1.len()
        )));
    }
    if template_count == 0 {
        return Err(Error::Capacity("template_count must be >= 1".into()));
    }
    if n_few == 0 {
        return Err(Error::Capacity("n_few must be >= 1".into()));
    }
    let _ = pool;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sft-pairs"));
    let mut pairs = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let target = partition.d2[rng.random_range(0..partition.d2.len())];
        let context = match mode {
            ContextMode::Similar => index.top_similar(target, n_few, &partition.d1),
            ContextMode::Random => {
                let picks = rand::seq::index::sample(&mut rng, partition.d1.len(), n_few);
                let mut ids: Vec<usize> = picks.iter().map(|i| partition.d1[i]).collect();
                ids.sort_unstable();
                ids
            }
        };
        pairs.push(PairSpec { context, target, reward: None, template: p % template_count });
    }
    Ok(pairs)
}

/// RL pairing over the whole pool with label-improvement rewards, rejection
/// sampled so positive and negative rewards stay near 50/50. Returns the
/// pairs and the population standard deviation of their rewards.
pub fn build_rl_pairs(
    pool: &OfflinePool,
    index: &SimilarityIndex,
    n_few: usize,
    n_pairs: usize,
    template_count: usize,
    mode: ContextMode,
    seed: u64,
) -> Result<(Vec<PairSpec>, f64)> {
    let n = pool.len();
    if n < n_few + 1 {
        return Err(Error::Capacity(format!(
            "need n_few+1={} pool entries, have {n}",
            n_few + 1
        )));
    }
    if template_count == 0 || n_few == 0 || n_pairs == 0 {
        return Err(Error::Capacity("n_few, n_pairs, template_count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rl-pairs"));
    let pos_quota = n_pairs.div_ceil(2);
    let neg_quota = n_pairs - pos_quota;
    let (mut pos, mut neg) = (0usize, 0usize);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut rewards = Vec::with_capacity(n_pairs);
    let mut attempts = 0usize;
    while pairs.len() < n_pairs {
        attempts += 1;
        if attempts > 100 * n_pairs {
            return Err(Error::Degenerate(format!(
                "reward balancing failed after {attempts} attempts ({pos} positive, {neg} negative)"
            )));
        }
        let target = rng.random_range(0..n);
        let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
        let context = match mode {
            ContextMode::Similar => index.top_similar(target, n_few, &others),
            ContextMode::Random => {
                let picks = rand::seq::index::sample(&mut rng, others.len(), n_few);
                let mut ids: Vec<usize> = picks.iter().map(|i| others[i]).collect();
                ids.sort_unstable();
                ids
            }
        };
        let best_context = context
            .iter()
            .map(|&i| pool.entries[i].label)
            .fold(f64::NEG_INFINITY, f64::max);
        let reward = pool.entries[target].label - best_context;
        if reward > 0.0 {
            if pos >= pos_quota {
                continue;
            }
            pos += 1;
        } else {
            if neg >= neg_quota {
                continue;
            }
            neg += 1;
        }
        rewards.push(reward);
        pairs.push(PairSpec {
            context,
            target,
            reward: Some(reward),
            template: (pairs.len()) % template_count,
        });
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rewards.len() as f64;
    let sigma_r = var.sqrt();
    if sigma_r <= 0.0 {
        return Err(Error::Degenerate("all rewards equal; sigma_r is zero".into()));
    }
    Ok((pairs, sigma_r))
}

// ---------------------------------------------------------------------------
// Persistence: line-delimited JSON, byte-stable given a seed.

#[derive(Serialize, Deserialize)]
struct PoolRecord {
    design: serde_json::Value,
    label: f64,
    norm: f64,
}

fn design_to_value(task: &TaskSpec, design: &Design) -> Result<serde_json::Value> {
    Ok(match design {
        Design::Discrete(_) => serde_json::Value::String(design.symbol_string(task)?),
        Design::Continuous(values) => serde_json::json!(values),
    })
}

fn design_from_value(task: &TaskSpec, value: &serde_json::Value) -> Result<Design> {
    match (task.kind, value) {
        (SpaceKind::Discrete, serde_json::Value::String(s)) => Design::from_symbol_string(task, s),
        (SpaceKind::Continuous, serde_json::Value::Array(items)) => {
            let values: Option<Vec<f64>> = items.iter().map(|v| v.as_f64()).collect();
            let values = values.ok_or_else(|| Error::Format("non-numeric design value".into()))?;
            let design = Design::Continuous(values);
            design.validate(task)?;
            Ok(design)
        }
        _ => Err(Error::Format("design value does not match task kind".into())),
    }
}

pub fn save_pool_jsonl(pool: &OfflinePool, task: &TaskSpec, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in &pool.entries {
        let record = PoolRecord {
            design: design_to_value(task, &entry.design)?,
            label: entry.label,
            norm: entry.norm,
        };
        serde_json::to_writer(&mut f, &record).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_pool_jsonl(task: &TaskSpec, path: &Path) -> Result<OfflinePool> {
    let file = std::fs::File::open(path)?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PoolRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?;
        entries.push(PoolEntry {
            design: design_from_value(task, &record.design)?,
            label: record.label,
            norm: record.norm,
        });
    }
    for w in entries.windows(2) {
        if w[0].label > w[1].label {
            return Err(Error::Format("pool file labels are not sorted".into()));
        }
    }
    let source_size = entries.len();
    Ok(OfflinePool { entries, source_size })
}

pub fn save_pairs_jsonl(pairs: &[PairSpec], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        serde_json::to_writer(&mut f, pair).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_pairs_jsonl(path: &Path) -> Result<Vec<PairSpec>> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(pairs)
}

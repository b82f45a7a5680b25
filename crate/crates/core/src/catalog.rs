//! Synthetic catalog and interaction logs.
//!
//! Items are drawn as noisy copies of cluster centers so that embedding
//! proximity mirrors a latent category. Users move between categories with a
//! first-order Markov kernel: with probability `markov_sharpness` the next
//! item's cluster is the current cluster's fixed successor, otherwise it is
//! uniform over clusters. Items inside the chosen cluster are uniform.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng;

/// Size of the synthetic title vocabulary.
pub const TITLE_VOCAB: usize = 64;

/// Minimum interactions per user.
pub const MIN_INTERACTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: u32,
    pub embedding: Vec<f64>,
    pub title_tokens: Vec<u32>,
    pub cluster_label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    items: Vec<Item>,
    dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CatalogParams {
    pub n_items: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Standard deviation of the per-coordinate noise around each cluster center.
    pub noise_scale: f64,
}

impl CatalogParams {
    pub fn new(n_items: usize, dim: usize, n_clusters: usize) -> Self {
        Self {
            n_items,
            dim,
            n_clusters,
            noise_scale: 0.15,
        }
    }
}

impl Catalog {
    /// Builds a catalog from records; ids must be exactly `0..n`.
    pub fn from_items(mut items: Vec<Item>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("catalog is empty"));
        }
        items.sort_by_key(|i| i.item_id);
        let dim = items[0].embedding.len();
        let mut titles = HashSet::new();
        for (idx, item) in items.iter().enumerate() {
            if item.item_id as usize != idx {
                return Err(Error::invalid(format!(
                    "item ids must be dense 0..n; found {} at position {idx}",
                    item.item_id
                )));
            }
            if item.embedding.len() != dim {
                return Err(Error::invalid(format!(
                    "item {} has embedding dimension {} (expected {dim})",
                    item.item_id,
                    item.embedding.len()
                )));
            }
            if item.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("item {} has a non-finite embedding", item.item_id)));
            }
            if item.title_tokens.is_empty() || item.title_tokens.iter().any(|&w| w as usize >= TITLE_VOCAB) {
                return Err(Error::invalid(format!("item {} has an invalid title", item.item_id)));
            }
            if !titles.insert(item.title_tokens.clone()) {
                return Err(Error::invalid(format!("item {} duplicates another title", item.item_id)));
            }
        }
        Ok(Self { items, dim })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: u32) -> &Item {
        &self.items[id as usize]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_clusters(&self) -> usize {
        self.items.iter().map(|i| i.cluster_label as usize + 1).max().unwrap_or(0)
    }

    /// Row-major `[n_items, dim]` embedding matrix.
    pub fn embedding_matrix(&self) -> Vec<f64> {
        self.items.iter().flat_map(|i| i.embedding.iter().copied()).collect()
    }

    /// Items of each cluster, in id order.
    pub fn members_by_cluster(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for it in &self.items {
            out[it.cluster_label as usize].push(it.item_id);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.items)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_items(io::read_jsonl(path)?)
    }

    /// Parses catalog JSONL text.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_items(io::from_jsonl(text, "catalog")?)
    }
}

/// Deterministic catalog with the default noise scale.
pub fn generate_catalog(seed: u64, n_items: usize, dim: usize, n_clusters: usize) -> Result<Catalog> {
    generate_catalog_with(seed, &CatalogParams::new(n_items, dim, n_clusters))
}

pub fn generate_catalog_with(seed: u64, p: &CatalogParams) -> Result<Catalog> {
    if p.n_clusters == 0 || p.n_clusters > p.n_items {
        return Err(Error::invalid(format!(
            "need 1 <= n_clusters <= n_items, got {} clusters for {} items",
            p.n_clusters, p.n_items
        )));
    }
    if p.dim < 4 {
        return Err(Error::invalid(format!("embedding dimension must be >= 4, got {}", p.dim)));
    }
    if !(p.noise_scale >= 0.0 && p.noise_scale.is_finite()) {
        return Err(Error::invalid("noise_scale must be finite and nonnegative"));
    }
    let mut r = rng::stream(seed, rng::CATALOG);
    let centers: Vec<Vec<f64>> = (0..p.n_clusters)
        .map(|_| (0..p.dim).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    // balanced labels, shuffled so ids carry no cluster information
    let mut labels: Vec<u32> = (0..p.n_items).map(|i| (i % p.n_clusters) as u32).collect();
    labels.shuffle(&mut r);
    let embeddings: Vec<Vec<f64>> = labels
        .iter()
        .map(|&c| {
            centers[c as usize]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    m + p.noise_scale * z
                })
                .collect()
        })
        .collect();
    let titles = compose_titles(seed, &labels, p.n_clusters);
    let items = labels
        .into_iter()
        .zip(embeddings)
        .zip(titles)
        .enumerate()
        .map(|(id, ((cluster_label, embedding), title_tokens))| Item {
            item_id: id as u32,
            embedding,
            title_tokens,
            cluster_label,
        })
        .collect();
    Catalog::from_items(items)
}

/// Titles are a cluster word followed by suffix words; a suffix that would
/// duplicate an existing title is extended with another word until unique.
fn compose_titles(seed: u64, labels: &[u32], n_clusters: usize) -> Vec<Vec<u32>> {
    let cluster_words = n_clusters.min(TITLE_VOCAB / 2);
    let suffix_pool: Vec<u32> = (cluster_words as u32..TITLE_VOCAB as u32).collect();
    let mut r = rng::stream(seed, rng::TITLES);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    labels
        .iter()
        .map(|&c| {
            let mut title = vec![c % cluster_words as u32];
            title.push(*suffix_pool.choose(&mut r).expect("non-empty pool"));
            while seen.contains(&title) {
                title.push(*suffix_pool.choose(&mut r).expect("non-empty pool"));
            }
            seen.insert(title.clone());
            title
        })
        .collect()
}

/// Cluster-level successor map: the support of the planted transition kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionKernel {
    pub successor: Vec<u32>,
}

impl TransitionKernel {
    pub fn planted(seed: u64, n_clusters: usize) -> Self {
        let mut r = rng::stream(seed, rng::KERNEL);
        let mut successor: Vec<u32> = (0..n_clusters as u32).collect();
        successor.shuffle(&mut r);
        Self { successor }
    }

    /// `P(next cluster = to | current = from)` for a given sharpness.
    pub fn prob(&self, from: u32, to: u32, sharpness: f64) -> f64 {
        let c = self.successor.len() as f64;
        let hit = if self.successor[from as usize] == to { 1.0 } else { 0.0 };
        sharpness * hit + (1.0 - sharpness) / c
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: u32,
    pub items: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionLog {
    pub users: Vec<UserHistory>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractionParams {
    pub n_users: usize,
    pub markov_sharpness: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl InteractionParams {
    pub fn new(n_users: usize, markov_sharpness: f64) -> Self {
        Self {
            n_users,
            markov_sharpness,
            min_len: MIN_INTERACTIONS,
            max_len: 12,
        }
    }
}

impl InteractionLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.users)
    }

    pub fn load(path: &Path, catalog: &Catalog) -> Result<Self> {
        let users: Vec<UserHistory> = io::read_jsonl(path)?;
        let log = Self { users };
        log.validate(catalog)?;
        Ok(log)
    }

    pub fn from_jsonl(text: &str, catalog: &Catalog) -> Result<Self> {
        let log = Self {
            users: io::from_jsonl(text, "interactions")?,
        };
        log.validate(catalog)?;
        Ok(log)
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        for u in &self.users {
            if u.items.len() < MIN_INTERACTIONS {
                return Err(Error::invalid(format!(
                    "user {} has {} interactions (minimum {MIN_INTERACTIONS})",
                    u.user_id,
                    u.items.len()
                )));
            }
            if let Some(bad) = u.items.iter().find(|&&i| i as usize >= catalog.len()) {
                return Err(Error::invalid(format!("user {} references unknown item {bad}", u.user_id)));
            }
        }
        Ok(())
    }
}

pub fn generate_interactions(
    seed: u64,
    catalog: &Catalog,
    n_users: usize,
    markov_sharpness: f64,
) -> Result<InteractionLog> {
    generate_interactions_with(seed, catalog, &InteractionParams::new(n_users, markov_sharpness))
}

pub fn generate_interactions_with(seed: u64, catalog: &Catalog, p: &InteractionParams) -> Result<InteractionLog> {
    if !(0.0..=1.0).contains(&p.markov_sharpness) {
        return Err(Error::invalid(format!(
            "markov_sharpness must lie in [0, 1], got {}",
            p.markov_sharpness
        )));
    }
    if p.min_len < MIN_INTERACTIONS || p.max_len < p.min_len {
        return Err(Error::invalid(format!(
            "history length range [{}, {}] invalid (minimum {MIN_INTERACTIONS})",
            p.min_len, p.max_len
        )));
    }
    let members = catalog.members_by_cluster();
    let n_clusters = members.len();
    let kernel = TransitionKernel::planted(seed, n_clusters);
    let mut r = rng::stream(seed, rng::INTERACTIONS);
    let users = (0..p.n_users)
        .map(|u| {
            let len = r.random_range(p.min_len..=p.max_len);
            let mut items = Vec::with_capacity(len);
            let mut cluster = r.random_range(0..n_clusters) as u32;
            for step in 0..len {
                if step > 0 {
                    cluster = if r.random::<f64>() < p.markov_sharpness {
                        kernel.successor[cluster as usize]
                    } else {
                        r.random_range(0..n_clusters) as u32
                    };
                }
                let pool = &members[cluster as usize];
                items.push(pool[r.random_range(0..pool.len())]);
            }
            UserHistory {
                user_id: u as u32,
                items,
            }
        })
        .collect();
    Ok(InteractionLog { users })
}

/// One next-item prediction instance: items seen so far and the item that followed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: u32,
    /// Index of the target within the user's full history (its timestamp).
    pub position: u32,
    pub history: Vec<u32>,
    pub target: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Split sizes for one user's `n` chronologically ordered examples.
///
/// Train takes `floor(0.8 n)`; the remainder is divided between valid and
/// test with test taking the larger half, so the final example is always a
/// test example. Users with fewer than 3 examples are train-only.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let train = n * 8 / 10;
    let rest = n - train;
    let test = rest.div_ceil(2);
    (train, rest - test, test)
}

/// Per-user chronological 8:1:1 split of next-item examples.
pub fn chronological_split(log: &InteractionLog) -> Result<DatasetSplit> {
    if log.users.is_empty() {
        return Err(Error::invalid("interaction log is empty"));
    }
    let mut split = DatasetSplit::default();
    for u in &log.users {
        let examples: Vec<Example> = (1..u.items.len())
            .map(|t| Example {
                user_id: u.user_id,
                position: t as u32,
                history: u.items[..t].to_vec(),
                target: u.items[t],
            })
            .collect();
        let (tr, va, _) = split_counts(examples.len());
        let mut it = examples.into_iter();
        split.train.extend(it.by_ref().take(tr));
        split.valid.extend(it.by_ref().take(va));
        split.test.extend(it);
    }
    Ok(split)
}

/// Keeps the most recent `max_len` items of every history.
pub fn truncate_histories(split: &DatasetSplit, max_len: usize) -> Result<DatasetSplit> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let cut = |xs: &[Example]| -> Vec<Example> {
        xs.iter()
            .map(|e| {
                let start = e.history.len().saturating_sub(max_len);
                Example {
                    history: e.history[start..].to_vec(),
                    ..e.clone()
                }
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: cut(&split.train),
        valid: cut(&split.valid),
        test: cut(&split.test),
    })
}

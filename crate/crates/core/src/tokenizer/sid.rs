use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codebook::Codebook;
use super::kmeans::nearest;
use crate::error::{Error, Result};
use crate::io;

/// An item's semantic ID: one code per level plus a collision index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidAssignment {
    pub item_id: u32,
    pub codes: Vec<u32>,
    /// What quantization left over; not persisted.
    #[serde(skip)]
    pub residual: Vec<f64>,
    pub disambiguation: u32,
}

/// Greedy residual quantization: per level, the nearest centroid to the
/// current residual. Returns the codes and the final residual.
pub fn quantize(x: &[f64], codebook: &Codebook) -> Result<(Vec<u32>, Vec<f64>)> {
    if x.len() != codebook.dim() {
        return Err(Error::invalid(format!(
            "vector has dimension {}, codebook expects {}",
            x.len(),
            codebook.dim()
        )));
    }
    let mut r = x.to_vec();
    let mut codes = Vec::with_capacity(codebook.n_levels());
    for l in 0..codebook.n_levels() {
        let (c, _) = nearest(codebook.level(l), codebook.dim(), &r);
        for (v, m) in r.iter_mut().zip(codebook.centroid(l, c)) {
            *v -= m;
        }
        codes.push(c as u32);
    }
    Ok((codes, r))
}

/// Sum of the selected centroids.
pub fn reconstruct(codes: &[u32], codebook: &Codebook) -> Result<Vec<f64>> {
    if codes.len() != codebook.n_levels() {
        return Err(Error::invalid(format!(
            "{} codes given for a {}-level codebook",
            codes.len(),
            codebook.n_levels()
        )));
    }
    let mut out = vec![0.0; codebook.dim()];
    for (l, &c) in codes.iter().enumerate() {
        if c as usize >= codebook.k() {
            return Err(Error::invalid(format!("code {c} at level {l} is outside [0, {})", codebook.k())));
        }
        for (o, m) in out.iter_mut().zip(codebook.centroid(l, c as usize)) {
            *o += m;
        }
    }
    Ok(out)
}

/// Quantizes every row of `vectors` (`[n, dim]`); item ids are row indices.
pub fn assign_all(vectors: &[f64], codebook: &Codebook) -> Result<Vec<SidAssignment>> {
    let dim = codebook.dim();
    vectors
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, x)| {
            let (codes, residual) = quantize(x, codebook)?;
            Ok(SidAssignment {
                item_id: i as u32,
                codes,
                residual,
                disambiguation: 0,
            })
        })
        .collect()
}

/// Numbers the members of every group sharing a code tuple 0, 1, 2, ... in
/// item-id order.
pub fn disambiguate_collisions(mut assignments: Vec<SidAssignment>) -> Vec<SidAssignment> {
    let mut order: Vec<usize> = (0..assignments.len()).collect();
    order.sort_by_key(|&i| assignments[i].item_id);
    let mut next: BTreeMap<Vec<u32>, u32> = BTreeMap::new();
    for i in order {
        let slot = next.entry(assignments[i].codes.clone()).or_insert(0);
        assignments[i].disambiguation = *slot;
        *slot += 1;
    }
    assignments
}

/// Disambiguated SIDs for a whole catalog, indexed by item id.
#[derive(Clone, Debug, PartialEq)]
pub struct SidTable {
    entries: Vec<SidAssignment>,
    group_size: Vec<u32>,
    n_levels: usize,
    k: usize,
}

impl SidTable {
    /// Requires dense item ids `0..n` and unique `(codes, disambiguation)`.
    pub fn new(mut entries: Vec<SidAssignment>, k: usize) -> Result<Self> {
        entries.sort_by_key(|e| e.item_id);
        let n_levels = entries.first().map_or(0, |e| e.codes.len());
        if n_levels == 0 {
            return Err(Error::invalid("SID table is empty or has zero-length codes"));
        }
        let mut groups: BTreeMap<&[u32], Vec<u32>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.item_id as usize != i {
                return Err(Error::invalid(format!("SID table item ids must be 0..n, found {} at {i}", e.item_id)));
            }
            if e.codes.len() != n_levels {
                return Err(Error::invalid(format!("item {} has {} codes, expected {n_levels}", e.item_id, e.codes.len())));
            }
            if let Some(c) = e.codes.iter().find(|&&c| c as usize >= k) {
                return Err(Error::invalid(format!("item {} has code {c} outside [0, {k})", e.item_id)));
            }
            groups.entry(&e.codes).or_default().push(e.disambiguation);
        }
        for (codes, mut idx) in groups.clone() {
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!("SID {codes:?} is shared by items with the same disambiguation index")));
            }
        }
        let group_size = entries.iter().map(|e| groups[e.codes.as_slice()].len() as u32).collect();
        Ok(Self {
            entries,
            group_size,
            n_levels,
            k,
        })
    }

    pub fn from_codebook(vectors: &[f64], codebook: &Codebook) -> Result<Self> {
        let assigned = disambiguate_collisions(assign_all(vectors, codebook)?);
        Self::new(assigned, codebook.k())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[SidAssignment] {
        &self.entries
    }

    pub fn get(&self, item_id: u32) -> Option<&SidAssignment> {
        self.entries.get(item_id as usize)
    }

    /// Whether the item shares its code tuple with another item, in which case
    /// its disambiguation index is part of the generated sequence.
    pub fn needs_suffix(&self, item_id: u32) -> bool {
        self.group_size.get(item_id as usize).is_some_and(|&g| g > 1)
    }

    /// Largest disambiguation index in use.
    pub fn max_disambiguation(&self) -> u32 {
        self.entries.iter().map(|e| e.disambiguation).max().unwrap_or(0)
    }

    pub fn n_colliding_items(&self) -> usize {
        self.group_size.iter().filter(|&&g| g > 1).count()
    }

    /// Distinct codes used at each level.
    pub fn utilization(&self) -> Vec<usize> {
        (0..self.n_levels)
            .map(|l| {
                let mut seen = vec![false; self.k];
                for e in &self.entries {
                    seen[e.codes[l] as usize] = true;
                }
                seen.iter().filter(|&&s| s).count()
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        io::to_jsonl(&self.entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.entries)
    }

    pub fn load(path: &Path, k: usize) -> Result<Self> {
        Self::new(io::read_jsonl(path)?, k)
    }

    pub fn from_jsonl(text: &str, k: usize) -> Result<Self> {
        Self::new(io::from_jsonl(text, "sids")?, k)
    }
}

use std::collections::BTreeMap;

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::tokenizer::SidTable;
use crate::vocab::{VocabLayout, EOS};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Node {
    children: BTreeMap<u32, usize>,
    item: Option<u32>,
}

/// Prefix tree over item token sequences; a node carrying an item id is a
/// complete sequence, after which EOS is legal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trie {
    nodes: Vec<Node>,
    n_items: usize,
}

impl Trie {
    pub const ROOT: usize = 0;

    pub fn new() -> Self {
        Self {
            nodes: vec![Node::default()],
            n_items: 0,
        }
    }

    pub fn insert(&mut self, path: &[u32], item: u32) -> Result<()> {
        if path.is_empty() {
            return Err(Error::invalid("empty trie path"));
        }
        if path.contains(&EOS) {
            return Err(Error::invalid("EOS cannot appear inside an item path"));
        }
        let mut cur = Self::ROOT;
        for &t in path {
            cur = match self.nodes[cur].children.get(&t) {
                Some(&n) => n,
                None => {
                    self.nodes.push(Node::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[cur].children.insert(t, n);
                    n
                }
            };
        }
        if let Some(first) = self.nodes[cur].item {
            return Err(Error::DuplicatePath {
                path: path.to_vec(),
                first,
                second: item,
            });
        }
        self.nodes[cur].item = Some(item);
        self.n_items += 1;
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Node reached by `prefix`, if it is a path in the trie.
    pub fn walk(&self, prefix: &[u32]) -> Option<usize> {
        let mut cur = Self::ROOT;
        for t in prefix {
            cur = *self.nodes[cur].children.get(t)?;
        }
        Some(cur)
    }

    pub fn child(&self, node: usize, token: u32) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn item_at(&self, node: usize) -> Option<u32> {
        self.nodes[node].item
    }

    /// Legal continuations of a node in ascending token order; EOS is legal
    /// exactly at complete sequences.
    pub fn legal_at(&self, node: usize) -> Vec<u32> {
        let n = &self.nodes[node];
        let mut out: Vec<u32> = Vec::with_capacity(n.children.len() + 1);
        if n.item.is_some() {
            out.push(EOS);
        }
        out.extend(n.children.keys().copied());
        out.sort_unstable();
        out
    }

    pub fn legal_next_tokens(&self, prefix: &[u32]) -> Result<Vec<u32>> {
        let node = self.walk(prefix).ok_or_else(|| Error::IllegalPrefix { prefix: prefix.to_vec() })?;
        Ok(self.legal_at(node))
    }

    /// Item reached by a full path (EOS optional at the end).
    pub fn lookup(&self, path: &[u32]) -> Option<u32> {
        let path = path.strip_suffix(&[EOS]).unwrap_or(path);
        self.walk(path).and_then(|n| self.item_at(n))
    }

    /// Every (path, item) pair in lexicographic path order.
    pub fn paths(&self) -> Vec<(Vec<u32>, u32)> {
        let mut out = Vec::with_capacity(self.n_items);
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if let Some(item) = self.nodes[node].item {
                out.push((prefix.clone(), item));
            }
            for (&t, &c) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }

    /// Number of complete sequences below `node`.
    pub fn terminals_below(&self, node: usize) -> usize {
        let mut count = 0;
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            count += self.nodes[n].item.is_some() as usize;
            stack.extend(self.nodes[n].children.values());
        }
        count
    }
}

impl Default for Trie {
    fn default() -> Self {
        Self::new()
    }
}

/// The SID trie and the canonical-title trie of one catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SidTrie {
    pub sid: Trie,
    pub title: Trie,
}

impl SidTrie {
    pub fn build(sids: &SidTable, layout: &VocabLayout, catalog: &Catalog) -> Result<Self> {
        let mut sid = Trie::new();
        let mut title = Trie::new();
        for e in sids.entries() {
            sid.insert(&layout.item_tokens(sids, e.item_id)?, e.item_id)?;
        }
        for item in catalog.items() {
            title.insert(&layout.title_tokens(catalog, item.item_id), item.item_id)?;
        }
        Ok(Self { sid, title })
    }

    pub fn build_sid_only(sids: &SidTable, layout: &VocabLayout) -> Result<Trie> {
        let mut sid = Trie::new();
        for e in sids.entries() {
            sid.insert(&layout.item_tokens(sids, e.item_id)?, e.item_id)?;
        }
        Ok(sid)
    }
}

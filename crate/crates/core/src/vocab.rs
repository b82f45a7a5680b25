//! Token id layout shared by the corpus builder, the policy and the decoder.
//!
//! Ids are laid out in disjoint contiguous ranges:
//! specials, task tags, title words, level-tagged SID tokens, and collision
//! suffix tokens. A SID token's level is recoverable from its id.

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::io;
use crate::tokenizer::SidTable;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
/// Delimits item titles inside a text history.
pub const ITEM_SEP: u32 = 4;
const N_SPECIAL: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GenerativeRetrieval,
    TextHistoryToSid,
    SidHistoryToTitle,
    SidToTitle,
    TitleToSid,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::GenerativeRetrieval,
        Task::TextHistoryToSid,
        Task::SidHistoryToTitle,
        Task::SidToTitle,
        Task::TitleToSid,
    ];

    pub fn index(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::GenerativeRetrieval => "generative_retrieval",
            Task::TextHistoryToSid => "text_history_to_sid",
            Task::SidHistoryToTitle => "sid_history_to_title",
            Task::SidToTitle => "sid_to_title",
            Task::TitleToSid => "title_to_sid",
        }
    }

    /// Whether the response is an item SID (as opposed to a title).
    pub fn emits_sid(self) -> bool {
        matches!(self, Task::GenerativeRetrieval | Task::TextHistoryToSid | Task::TitleToSid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Sep,
    ItemSep,
    Task(Task),
    Word(u32),
    Sid { level: usize, code: u32 },
    Suffix(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_words: usize,
    pub n_levels: usize,
    pub k: usize,
    /// Number of collision suffix tokens (0 when every SID is unique).
    pub n_suffix: usize,
}

impl VocabLayout {
    pub fn new(n_words: usize, n_levels: usize, k: usize, n_suffix: usize) -> Self {
        Self {
            n_words,
            n_levels,
            k,
            n_suffix,
        }
    }

    pub fn for_table(n_words: usize, sids: &SidTable) -> Self {
        let n_suffix = if sids.n_colliding_items() > 0 {
            sids.max_disambiguation() as usize + 1
        } else {
            0
        };
        Self::new(n_words, sids.n_levels(), sids.k(), n_suffix)
    }

    fn task_base(&self) -> u32 {
        N_SPECIAL
    }

    fn word_base(&self) -> u32 {
        self.task_base() + Task::ALL.len() as u32
    }

    fn sid_base(&self) -> u32 {
        self.word_base() + self.n_words as u32
    }

    fn suffix_base(&self) -> u32 {
        self.sid_base() + (self.n_levels * self.k) as u32
    }

    pub fn size(&self) -> usize {
        self.suffix_base() as usize + self.n_suffix
    }

    pub fn task_token(&self, t: Task) -> u32 {
        self.task_base() + t.index() as u32
    }

    pub fn word_token(&self, w: u32) -> u32 {
        debug_assert!((w as usize) < self.n_words);
        self.word_base() + w
    }

    pub fn sid_token(&self, level: usize, code: u32) -> u32 {
        debug_assert!(level < self.n_levels && (code as usize) < self.k);
        self.sid_base() + (level * self.k) as u32 + code
    }

    pub fn suffix_token(&self, index: u32) -> u32 {
        debug_assert!((index as usize) < self.n_suffix);
        self.suffix_base() + index
    }

    pub fn kind(&self, id: u32) -> Result<TokenKind> {
        let kind = match id {
            PAD => TokenKind::Pad,
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            SEP => TokenKind::Sep,
            ITEM_SEP => TokenKind::ItemSep,
            _ if id < self.word_base() => TokenKind::Task(Task::ALL[(id - self.task_base()) as usize]),
            _ if id < self.sid_base() => TokenKind::Word(id - self.word_base()),
            _ if id < self.suffix_base() => {
                let off = (id - self.sid_base()) as usize;
                TokenKind::Sid {
                    level: off / self.k,
                    code: (off % self.k) as u32,
                }
            }
            _ if (id as usize) < self.size() => TokenKind::Suffix(id - self.suffix_base()),
            _ => {
                return Err(Error::UnknownToken {
                    token: id,
                    vocab_size: self.size(),
                })
            }
        };
        Ok(kind)
    }

    /// SID tokens of an item, followed by its suffix token when it collides.
    pub fn item_tokens(&self, sids: &SidTable, item_id: u32) -> Result<Vec<u32>> {
        let sa = sids.get(item_id).ok_or(Error::MissingSid { item_id })?;
        let mut out: Vec<u32> = sa.codes.iter().enumerate().map(|(l, &c)| self.sid_token(l, c)).collect();
        if sids.needs_suffix(item_id) {
            if sa.disambiguation as usize >= self.n_suffix {
                return Err(Error::invalid(format!(
                    "item {item_id} needs suffix {} but the layout has {}",
                    sa.disambiguation, self.n_suffix
                )));
            }
            out.push(self.suffix_token(sa.disambiguation));
        }
        Ok(out)
    }

    pub fn title_tokens(&self, catalog: &Catalog, item_id: u32) -> Vec<u32> {
        catalog.item(item_id).title_tokens.iter().map(|&w| self.word_token(w)).collect()
    }

    /// Stable fingerprint stored in checkpoints.
    pub fn hash(&self) -> String {
        io::sha256_hex(
            format!(
                "vocab-v1 words={} levels={} k={} suffix={} specials={} tasks={}",
                self.n_words,
                self.n_levels,
                self.k,
                self.n_suffix,
                N_SPECIAL,
                Task::ALL.len()
            )
            .as_bytes(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_maps_back_to_its_constructor() {
        let v = VocabLayout::new(64, 3, 32, 2);
        let mut seen = vec![false; v.size()];
        let mut mark = |id: u32| {
            assert!(!seen[id as usize], "id {id} produced twice");
            seen[id as usize] = true;
        };
        for id in [PAD, BOS, EOS, SEP, ITEM_SEP] {
            mark(id);
        }
        for t in Task::ALL {
            assert_eq!(v.kind(v.task_token(t)).unwrap(), TokenKind::Task(t));
            mark(v.task_token(t));
        }
        for w in 0..64 {
            assert_eq!(v.kind(v.word_token(w)).unwrap(), TokenKind::Word(w));
            mark(v.word_token(w));
        }
        for l in 0..3 {
            for c in 0..32 {
                assert_eq!(v.kind(v.sid_token(l, c)).unwrap(), TokenKind::Sid { level: l, code: c });
                mark(v.sid_token(l, c));
            }
        }
        for s in 0..2 {
            mark(v.suffix_token(s));
        }
        assert!(seen.iter().all(|&s| s));
        assert!(v.kind(v.size() as u32).is_err());
    }

    #[test]
    fn same_code_at_different_levels_is_distinct() {
        let v = VocabLayout::new(8, 3, 4, 0);
        assert_ne!(v.sid_token(0, 1), v.sid_token(1, 1));
    }
}

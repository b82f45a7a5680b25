//! Decoder-only transformer over the [`VocabLayout`] token space.
//!
//! Two forward implementations share one parameter store: a differentiable
//! packed-batch forward on the autodiff tape (training, gradient checks) and a
//! KV-cached forward in plain loops (decoding, scoring).

mod checkpoint;
mod infer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use infer::KvCache;

use minirec_autodiff::{Graph, ParamId, ParamStore, Segment, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::VocabLayout;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyConfig {
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Share the input embedding table with the output projection.
    pub tie_embeddings: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            width: 128,
            n_heads: 4,
            ff_width: 256,
            max_len: 64,
            seed: 0,
            tie_embeddings: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_layers == 0 {
            problems.push("policy.layers must be positive".to_string());
        }
        if self.width == 0 || self.n_heads == 0 || self.width % self.n_heads != 0 {
            problems.push(format!(
                "policy.width ({}) must be a positive multiple of policy.heads ({})",
                self.width, self.n_heads
            ));
        }
        if self.ff_width == 0 {
            problems.push("policy.ff_width must be positive".to_string());
        }
        if self.max_len < 2 {
            problems.push("policy.max_len must be at least 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }

    /// Closed-form parameter count for a vocabulary of `vocab` tokens.
    pub fn param_count(&self, vocab: usize) -> usize {
        let (w, f) = (self.width, self.ff_width);
        let per_layer = 4 * w + 4 * w * w + w * f + f + f * w + w;
        let head = if self.tie_embeddings { 0 } else { vocab * w };
        vocab * w + self.max_len * w + self.n_layers * per_layer + 2 * w + head
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct PolicyIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub head: Option<ParamId>,
}

impl PolicyIds {
    fn resolve(store: &ParamStore, n_layers: usize, tied: bool) -> Result<Self> {
        let find = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| Error::invalid(format!("parameter {name} missing from store")))
        };
        let layers = (0..n_layers)
            .map(|l| {
                let p = |s: &str| find(format!("layer{l}.{s}"));
                Ok(LayerIds {
                    ln1_g: p("ln1.g")?,
                    ln1_b: p("ln1.b")?,
                    wq: p("attn.wq")?,
                    wk: p("attn.wk")?,
                    wv: p("attn.wv")?,
                    wo: p("attn.wo")?,
                    ln2_g: p("ln2.g")?,
                    ln2_b: p("ln2.b")?,
                    w1: p("ff.w1")?,
                    b1: p("ff.b1")?,
                    w2: p("ff.w2")?,
                    b2: p("ff.b2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_emb: find("tok_emb".into())?,
            pos_emb: find("pos_emb".into())?,
            layers,
            lnf_g: find("ln_f.g".into())?,
            lnf_b: find("ln_f.b".into())?,
            head: if tied { None } else { Some(find("head".into())?) },
        })
    }
}

/// Token sequences packed row-wise for one tape forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Packed {
    /// Row index of position `t` of sequence `s`.
    pub fn row(&self, s: usize, t: usize) -> usize {
        self.segments[s].start + t
    }
}

/// The policy: configuration, vocabulary layout and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    layout: VocabLayout,
    store: ParamStore,
    ids: PolicyIds,
}

impl Policy {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: PolicyConfig, layout: VocabLayout) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, rng::POLICY_INIT);
        let (v, w, f) = (layout.size(), config.width, config.ff_width);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut s = ParamStore::new();
        s.add("tok_emb", Tensor::randn(&[v, w], std, &mut r), true);
        s.add("pos_emb", Tensor::randn(&[config.max_len, w], std, &mut r), true);
        for l in 0..config.n_layers {
            let n = |x: &str| format!("layer{l}.{x}");
            s.add(n("ln1.g"), Tensor::full(&[w], 1.0), false);
            s.add(n("ln1.b"), Tensor::zeros(&[w]), false);
            s.add(n("attn.wq"), Tensor::randn(&[w, w], std, &mut r), true);
            s.add(n("attn.wk"), Tensor::randn(&[w, w], std, &mut r), true);
            s.add(n("attn.wv"), Tensor::randn(&[w, w], std, &mut r), true);
            s.add(n("attn.wo"), Tensor::randn(&[w, w], proj_std, &mut r), true);
            s.add(n("ln2.g"), Tensor::full(&[w], 1.0), false);
            s.add(n("ln2.b"), Tensor::zeros(&[w]), false);
            s.add(n("ff.w1"), Tensor::randn(&[w, f], std, &mut r), true);
            s.add(n("ff.b1"), Tensor::zeros(&[f]), false);
            s.add(n("ff.w2"), Tensor::randn(&[f, w], proj_std, &mut r), true);
            s.add(n("ff.b2"), Tensor::zeros(&[w]), false);
        }
        s.add("ln_f.g", Tensor::full(&[w], 1.0), false);
        s.add("ln_f.b", Tensor::zeros(&[w]), false);
        if !config.tie_embeddings {
            s.add("head", Tensor::randn(&[v, w], std, &mut r), true);
        }
        Self::from_parts(config, layout, s)
    }

    /// Reassembles a policy from a parameter store, checking every tensor's shape.
    pub fn from_parts(config: PolicyConfig, layout: VocabLayout, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = PolicyIds::resolve(&store, config.n_layers, config.tie_embeddings)?;
        let expected = config.param_count(layout.size());
        if store.num_scalars() != expected {
            return Err(Error::Incompatible {
                what: "parameter count",
                expected: expected.to_string(),
                found: store.num_scalars().to_string(),
            });
        }
        let (v, w, f) = (layout.size(), config.width, config.ff_width);
        let mut want: Vec<(ParamId, Vec<usize>)> = vec![
            (ids.tok_emb, vec![v, w]),
            (ids.pos_emb, vec![config.max_len, w]),
            (ids.lnf_g, vec![w]),
            (ids.lnf_b, vec![w]),
        ];
        if let Some(h) = ids.head {
            want.push((h, vec![v, w]));
        }
        for l in &ids.layers {
            want.extend([
                (l.ln1_g, vec![w]),
                (l.ln1_b, vec![w]),
                (l.wq, vec![w, w]),
                (l.wk, vec![w, w]),
                (l.wv, vec![w, w]),
                (l.wo, vec![w, w]),
                (l.ln2_g, vec![w]),
                (l.ln2_b, vec![w]),
                (l.w1, vec![w, f]),
                (l.b1, vec![f]),
                (l.w2, vec![f, w]),
                (l.b2, vec![w]),
            ]);
        }
        for (id, shape) in want {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Incompatible {
                    what: "parameter shape",
                    expected: format!("{} {:?}", store.name(id), shape),
                    found: format!("{:?}", store.get(id).shape()),
                });
            }
        }
        Ok(Self {
            config,
            layout,
            store,
            ids,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.size()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Copy of this policy with another parameter store of the same layout.
    pub fn with_store(&self, store: ParamStore) -> Result<Self> {
        Self::from_parts(self.config.clone(), self.layout, store)
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max length {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.layout.size()) {
            return Err(Error::UnknownToken {
                token: bad,
                vocab_size: self.layout.size(),
            });
        }
        Ok(())
    }

    pub fn pack(&self, seqs: &[&[u32]]) -> Result<Packed> {
        let mut p = Packed {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            if s.is_empty() {
                return Err(Error::invalid("empty sequence"));
            }
            self.check_tokens(s)?;
            p.segments.push(Segment {
                start: p.tokens.len(),
                len: s.len(),
            });
            p.tokens.extend(s.iter().map(|&t| t as usize));
            p.positions.extend(0..s.len());
        }
        if p.tokens.is_empty() {
            return Err(Error::invalid("no sequences to forward"));
        }
        Ok(p)
    }

    fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let n = g.normalize(x, LN_EPS)?;
        let gv = g.param(store, gain)?;
        let bv = g.param(store, bias)?;
        let y = g.mul(n, gv)?;
        Ok(g.add(y, bv)?)
    }

    /// Final hidden states `[rows, width]` of a packed batch, computed from `store`.
    pub fn hidden(&self, g: &mut Graph, store: &ParamStore, packed: &Packed) -> Result<Var> {
        let tok = g.param(store, self.ids.tok_emb)?;
        let pos = g.param(store, self.ids.pos_emb)?;
        let te = g.gather(tok, &packed.tokens)?;
        let pe = g.gather(pos, &packed.positions)?;
        let mut x = g.add(te, pe)?;
        for l in &self.ids.layers {
            let a = Self::layer_norm(g, store, x, l.ln1_g, l.ln1_b)?;
            let wq = g.param(store, l.wq)?;
            let wk = g.param(store, l.wk)?;
            let wv = g.param(store, l.wv)?;
            let wo = g.param(store, l.wo)?;
            let q = g.matmul(a, wq)?;
            let k = g.matmul(a, wk)?;
            let v = g.matmul(a, wv)?;
            let att = g.causal_attention(q, k, v, &packed.segments, self.config.n_heads)?;
            let att = g.matmul(att, wo)?;
            x = g.add(x, att)?;
            let b = Self::layer_norm(g, store, x, l.ln2_g, l.ln2_b)?;
            let w1 = g.param(store, l.w1)?;
            let b1 = g.param(store, l.b1)?;
            let w2 = g.param(store, l.w2)?;
            let b2 = g.param(store, l.b2)?;
            let h = g.matmul(b, w1)?;
            let h = g.add(h, b1)?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, w2)?;
            let h = g.add(h, b2)?;
            x = g.add(x, h)?;
        }
        Self::layer_norm(g, store, x, self.ids.lnf_g, self.ids.lnf_b)
    }

    /// Logits `[rows.len(), vocab]` at selected rows of `hidden`.
    pub fn logits_at(&self, g: &mut Graph, store: &ParamStore, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather(hidden, rows)?;
        let table = g.param(store, self.ids.head.unwrap_or(self.ids.tok_emb))?;
        Ok(g.matmul_bt(h, table)?)
    }

    /// Per-token log-probabilities of each completion given its prompt, on the
    /// tape, concatenated in order. Also returns the completion lengths.
    pub fn completion_log_probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pairs: &[(&[u32], &[u32])],
    ) -> Result<(Var, Vec<usize>)> {
        let joined: Vec<Vec<u32>> = pairs
            .iter()
            .map(|(p, c)| {
                if p.is_empty() || c.is_empty() {
                    return Err(Error::invalid("prompt and completion must be non-empty"));
                }
                Ok(p.iter().chain(c.iter()).copied().collect())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[u32]> = joined.iter().map(|s| s.as_slice()).collect();
        let packed = self.pack(&refs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut lens = Vec::with_capacity(pairs.len());
        for (s, (p, c)) in pairs.iter().enumerate() {
            for (j, &tok) in c.iter().enumerate() {
                rows.push(packed.row(s, p.len() + j - 1));
                targets.push(tok as usize);
            }
            lens.push(c.len());
        }
        let h = self.hidden(g, store, &packed)?;
        let logits = self.logits_at(g, store, h, &rows)?;
        Ok((g.token_log_prob(logits, &targets)?, lens))
    }

    /// Logits at every position, `[len, vocab]`.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.forward_logits_batch(&[tokens])?.remove(0))
    }

    pub fn forward_logits_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Tensor>> {
        let packed = self.pack(seqs)?;
        let mut g = Graph::new();
        let h = self.hidden(&mut g, &self.store, &packed)?;
        let all: Vec<usize> = (0..packed.tokens.len()).collect();
        let logits = self.logits_at(&mut g, &self.store, h, &all)?;
        let lv = g.value(logits);
        let v = self.vocab_size();
        packed
            .segments
            .iter()
            .map(|s| Ok(Tensor::new(vec![s.len, v], lv.data()[s.start * v..(s.start + s.len) * v].to_vec())?))
            .collect()
    }

    /// Per-token log-probabilities of `completion` after `prompt`, and their
    /// plain sum. Uses the cached decoding path, so scores agree exactly with
    /// those accumulated by beam search.
    pub fn sequence_log_prob(&self, prompt: &[u32], completion: &[u32]) -> Result<(Vec<f64>, f64)> {
        if completion.is_empty() {
            return Err(Error::invalid("completion must be non-empty"));
        }
        if prompt.is_empty() {
            return Err(Error::invalid("prompt must be non-empty"));
        }
        self.check_tokens(&[prompt, completion].concat())?;
        let (mut cache, mut logits) = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(completion.len());
        for (j, &tok) in completion.iter().enumerate() {
            out.push(log_softmax_at(&logits, tok as usize));
            if j + 1 < completion.len() {
                logits = self.step(&mut cache, tok)?;
            }
        }
        let sum = out.iter().sum();
        Ok((out, sum))
    }
}

/// `log softmax(row)[i]`.
pub fn log_softmax_at(row: &[f64], i: usize) -> f64 {
    row[i] - log_sum_exp(row)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

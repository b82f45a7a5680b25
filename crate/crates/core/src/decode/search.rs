//! Legality-masked generation: beam search, top-k sampling and dynamic
//! sampling over a [`Trie`].

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trie::Trie;
use crate::error::{Error, Result};
use crate::policy::{log_sum_exp, KvCache, Policy};
use crate::rng;
use crate::vocab::EOS;

/// How a token's log-probability is measured while decoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Softmax renormalized over the legal tokens only. A step with a single
    /// legal token contributes exactly 0.
    #[default]
    Masked,
    /// Full-vocabulary softmax evaluated at the chosen legal token.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generated tokens, ending in EOS.
    pub tokens: Vec<u32>,
    pub item: u32,
    /// Sum of per-token log-probabilities; never divided by length.
    pub score: f64,
    pub token_log_probs: Vec<f64>,
    /// 1-based position in the group ranking.
    pub rank: usize,
    /// Order in which a sampler produced this candidate (beam: rank - 1).
    pub draw: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationGroup {
    /// Candidates in rank order.
    pub candidates: Vec<Candidate>,
    /// Set when the requested width exceeded the reachable items.
    pub clamped_width: Option<usize>,
    /// Number of sampler draws the group was selected from.
    pub draws: usize,
}

impl GenerationGroup {
    pub fn items(&self) -> Vec<u32> {
        self.candidates.iter().map(|c| c.item).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Only the `top_k` highest-logit legal tokens are eligible at a step.
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            top_k: 64,
            temperature: 1.0,
        }
    }
}

/// Log-probability of each legal token under `scoring`.
fn legal_log_probs(logits: Option<&[f64]>, legal: &[u32], scoring: Scoring) -> Vec<f64> {
    match (scoring, logits) {
        (Scoring::Masked, _) if legal.len() == 1 => vec![0.0],
        (Scoring::Masked, Some(z)) => {
            let sub: Vec<f64> = legal.iter().map(|&t| z[t as usize]).collect();
            let lse = log_sum_exp(&sub);
            sub.iter().map(|x| x - lse).collect()
        }
        (Scoring::Raw, Some(z)) => {
            let lse = log_sum_exp(z);
            legal.iter().map(|&t| z[t as usize] - lse).collect()
        }
        (_, None) => unreachable!("logits are computed whenever they are needed"),
    }
}

fn needs_logits(legal: &[u32], scoring: Scoring) -> bool {
    scoring == Scoring::Raw || legal.len() > 1
}

/// A partial hypothesis whose cache may lag behind its tokens.
#[derive(Clone)]
struct Hyp {
    tokens: Vec<u32>,
    lps: Vec<f64>,
    score: f64,
    node: usize,
    cache: KvCache,
    pending: Vec<u32>,
    logits: Option<Vec<f64>>,
    finished: bool,
    draw: usize,
}

/// Brings every listed hypothesis's cache up to date and stores its logits.
fn refresh(policy: &Policy, hyps: &mut [Hyp], which: &[usize]) -> Result<()> {
    if which.is_empty() {
        return Ok(());
    }
    let runs: Vec<Vec<u32>> = which.iter().map(|&i| std::mem::take(&mut hyps[i].pending)).collect();
    let mut caches: Vec<KvCache> = which.iter().map(|&i| std::mem::replace(&mut hyps[i].cache, policy.empty_cache())).collect();
    let logits = {
        let mut refs: Vec<&mut KvCache> = caches.iter_mut().collect();
        let run_refs: Vec<&[u32]> = runs.iter().map(|r| r.as_slice()).collect();
        policy.feed_batch(&mut refs, &run_refs)?
    };
    for ((&i, cache), l) in which.iter().zip(caches).zip(logits) {
        hyps[i].cache = cache;
        hyps[i].logits = Some(l);
    }
    Ok(())
}

fn root(policy: &Policy, prompt: &[u32]) -> Result<Hyp> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must be non-empty"));
    }
    let (cache, logits) = policy.prefill(prompt)?;
    Ok(Hyp {
        tokens: Vec::new(),
        lps: Vec::new(),
        score: 0.0,
        node: Trie::ROOT,
        cache,
        pending: Vec::new(),
        logits: Some(logits),
        finished: false,
        draw: 0,
    })
}

fn cmp_hyp(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn into_candidate(trie: &Trie, h: Hyp, rank: usize) -> Candidate {
    let item = trie.lookup(&h.tokens).expect("finished hypotheses end at an item");
    Candidate {
        tokens: h.tokens,
        item,
        score: h.score,
        token_log_probs: h.lps,
        rank,
        draw: h.draw,
    }
}

/// Beam search over legal continuations, ranking by the plain sum of token
/// log-probabilities. Ties are broken by ascending token sequence.
pub fn beam_search(policy: &Policy, prompt: &[u32], width: usize, trie: &Trie, scoring: Scoring) -> Result<GenerationGroup> {
    if width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if trie.n_items() == 0 {
        return Err(Error::invalid("trie is empty"));
    }
    let reachable = trie.n_items();
    let clamped_width = (width > reachable).then_some(reachable);
    let width = width.min(reachable);
    let mut beams = vec![root(policy, prompt)?];
    while beams.iter().any(|b| !b.finished) {
        let stale: Vec<usize> = (0..beams.len())
            .filter(|&i| {
                let b = &beams[i];
                !b.finished && b.logits.is_none() && needs_logits(&trie.legal_at(b.node), scoring)
            })
            .collect();
        refresh(policy, &mut beams, &stale)?;
        // (score, tokens, parent, token, log-prob); parent None = carried finished beam
        let mut cands: Vec<(f64, Vec<u32>, usize, Option<(u32, f64)>)> = Vec::new();
        for (i, b) in beams.iter().enumerate() {
            if b.finished {
                cands.push((b.score, b.tokens.clone(), i, None));
                continue;
            }
            let legal = trie.legal_at(b.node);
            let lps = legal_log_probs(b.logits.as_deref(), &legal, scoring);
            for (&t, lp) in legal.iter().zip(lps) {
                let mut toks = b.tokens.clone();
                toks.push(t);
                cands.push((b.score + lp, toks, i, Some((t, lp))));
            }
        }
        cands.sort_by(|a, b| cmp_hyp((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (score, tokens, parent, step) in cands {
            let p = &beams[parent];
            let mut h = Hyp {
                tokens,
                lps: p.lps.clone(),
                score,
                node: p.node,
                cache: p.cache.clone(),
                pending: p.pending.clone(),
                logits: None,
                finished: p.finished,
                draw: 0,
            };
            if let Some((t, lp)) = step {
                h.lps.push(lp);
                if t == EOS {
                    h.finished = true;
                } else {
                    h.node = trie.child(p.node, t).expect("legal token has a child");
                    h.pending.push(t);
                }
            }
            next.push(h);
        }
        beams = next;
    }
    let candidates = beams
        .into_iter()
        .enumerate()
        .map(|(r, mut h)| {
            h.draw = r;
            into_candidate(trie, h, r + 1)
        })
        .collect();
    Ok(GenerationGroup {
        candidates,
        clamped_width,
        draws: width,
    })
}

/// `n` independent ancestral samples, each choosing among the top-k legal
/// tokens with renormalized probabilities. Returned in draw order with
/// `rank` unset (0).
pub fn sample_raw(
    policy: &Policy,
    prompt: &[u32],
    n: usize,
    trie: &Trie,
    config: &SampleConfig,
    scoring: Scoring,
    seed: u64,
) -> Result<Vec<Candidate>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if trie.n_items() == 0 {
        return Err(Error::invalid("trie is empty"));
    }
    if !(config.temperature > 0.0) || config.top_k == 0 {
        return Err(Error::invalid("sampling needs a positive temperature and top_k"));
    }
    let mut r = rng::stream(seed, rng::SAMPLING);
    let base = root(policy, prompt)?;
    let mut hyps: Vec<Hyp> = (0..n)
        .map(|d| {
            let mut h = base.clone();
            h.draw = d;
            h
        })
        .collect();
    while hyps.iter().any(|h| !h.finished) {
        let stale: Vec<usize> = (0..hyps.len())
            .filter(|&i| {
                let h = &hyps[i];
                !h.finished && h.logits.is_none() && needs_logits(&trie.legal_at(h.node), scoring)
            })
            .collect();
        refresh(policy, &mut hyps, &stale)?;
        for h in hyps.iter_mut().filter(|h| !h.finished) {
            let legal = trie.legal_at(h.node);
            let lps = legal_log_probs(h.logits.as_deref(), &legal, scoring);
            let pick = if legal.len() == 1 {
                0
            } else {
                let z = h.logits.as_deref().expect("refreshed");
                let mut order: Vec<usize> = (0..legal.len()).collect();
                order.sort_by(|&a, &b| z[legal[b] as usize].total_cmp(&z[legal[a] as usize]).then(a.cmp(&b)));
                order.truncate(config.top_k);
                let scaled: Vec<f64> = order.iter().map(|&i| z[legal[i] as usize] / config.temperature).collect();
                let lse = log_sum_exp(&scaled);
                let mut u: f64 = r.random();
                let mut chosen = order[order.len() - 1];
                for (&i, s) in order.iter().zip(&scaled) {
                    let p = (s - lse).exp();
                    if u < p {
                        chosen = i;
                        break;
                    }
                    u -= p;
                }
                chosen
            };
            let t = legal[pick];
            h.tokens.push(t);
            h.lps.push(lps[pick]);
            h.score += lps[pick];
            h.logits = None;
            if t == EOS {
                h.finished = true;
            } else {
                h.node = trie.child(h.node, t).expect("legal token has a child");
                h.pending.push(t);
            }
        }
    }
    Ok(hyps.into_iter().map(|h| into_candidate(trie, h, 0)).collect())
}

/// Assigns ranks by descending score; equal scores keep draw order.
fn rank_in_place(cands: &mut [Candidate]) {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.draw.cmp(&b.draw)));
    for (i, c) in cands.iter_mut().enumerate() {
        c.rank = i + 1;
    }
}

/// `g` top-k samples, duplicates allowed.
pub fn sample_top_k(
    policy: &Policy,
    prompt: &[u32],
    g: usize,
    trie: &Trie,
    config: &SampleConfig,
    scoring: Scoring,
    seed: u64,
) -> Result<GenerationGroup> {
    if g == 0 {
        return Err(Error::invalid("group size must be at least 1"));
    }
    let mut candidates = sample_raw(policy, prompt, g, trie, config, scoring, seed)?;
    rank_in_place(&mut candidates);
    Ok(GenerationGroup {
        candidates,
        clamped_width: None,
        draws: g,
    })
}

/// Number of draws dynamic sampling makes for a group of `g`.
pub fn dynamic_draws(g: usize) -> usize {
    (3 * g).div_ceil(2)
}

/// Selects `g` of `draws`: the target first if it was drawn, then unseen
/// items in draw order, then repeats in draw order.
pub fn select_dynamic(draws: &[Candidate], g: usize, target: Option<u32>) -> Vec<Candidate> {
    let mut taken = vec![false; draws.len()];
    let mut out: Vec<Candidate> = Vec::with_capacity(g);
    let mut seen = std::collections::HashSet::new();
    if let Some(t) = target {
        if let Some(i) = draws.iter().position(|c| c.item == t) {
            taken[i] = true;
            seen.insert(t);
            out.push(draws[i].clone());
        }
    }
    for (i, c) in draws.iter().enumerate() {
        if out.len() == g {
            break;
        }
        if !taken[i] && seen.insert(c.item) {
            taken[i] = true;
            out.push(c.clone());
        }
    }
    for (i, c) in draws.iter().enumerate() {
        if out.len() == g {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            out.push(c.clone());
        }
    }
    out
}

/// Over-generates `ceil(1.5 g)` samples and keeps `g` of them. The target is
/// never injected when it was not drawn.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_sample(
    policy: &Policy,
    prompt: &[u32],
    g: usize,
    target: Option<u32>,
    trie: &Trie,
    config: &SampleConfig,
    scoring: Scoring,
    seed: u64,
) -> Result<GenerationGroup> {
    if g < 2 {
        return Err(Error::invalid("dynamic sampling needs a group of at least 2"));
    }
    let n = dynamic_draws(g);
    let draws = sample_raw(policy, prompt, n, trie, config, scoring, seed)?;
    let mut candidates = select_dynamic(&draws, g, target);
    rank_in_place(&mut candidates);
    Ok(GenerationGroup {
        candidates,
        clamped_width: None,
        draws: n,
    })
}

/// Score of a complete path under the same per-step rule beam search uses.
pub fn constrained_log_prob(policy: &Policy, prompt: &[u32], completion: &[u32], trie: &Trie, scoring: Scoring) -> Result<f64> {
    let mut h = root(policy, prompt)?;
    for &t in completion {
        let legal = trie.legal_at(h.node);
        let pos = legal
            .iter()
            .position(|&x| x == t)
            .ok_or_else(|| Error::IllegalPrefix { prefix: [h.tokens.as_slice(), &[t]].concat() })?;
        if h.logits.is_none() && needs_logits(&legal, scoring) {
            let mut one = [h];
            refresh(policy, &mut one, &[0])?;
            [h] = one;
        }
        let lps = legal_log_probs(h.logits.as_deref(), &legal, scoring);
        h.score += lps[pos];
        h.tokens.push(t);
        h.logits = None;
        if t != EOS {
            h.node = trie.child(h.node, t).expect("legal");
            h.pending.push(t);
        }
    }
    Ok(h.score)
}

//! Independent oracles shared by the module tests and the acceptance run.

use minirec_autodiff::{ParamId, ParamStore};
use minirec_core::catalog::generate_catalog;
use minirec_core::decode::{diversity, Trie};
use minirec_core::grpo::{rule_only_reward, token_log_probs, RolloutGroup};
use minirec_core::policy::{Policy, PolicyConfig};
use minirec_core::tokenizer::{RqVae, RqVaeConfig};
use minirec_core::vocab::{Task, VocabLayout, BOS, EOS, SEP};

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plain-f64 RQ-VAE loss in which everything under a stop-gradient is pinned
/// to its value at `frozen`, as are the chosen codes.
pub struct FrozenOracle {
    x: Vec<f64>,
    n: usize,
    d: usize,
    h: usize,
    ld: usize,
    k: usize,
    beta: f64,
    enc: [ParamId; 4],
    dec: [ParamId; 4],
    books: Vec<ParamId>,
    pub codes: Vec<Vec<usize>>,
    r_sg: Vec<Vec<f64>>,
    e_sg: Vec<Vec<f64>>,
    gap: Vec<f64>,
}

pub fn mlp(store: &ParamStore, ids: [ParamId; 4], x: &[f64], d_in: usize, h: usize, d_out: usize) -> Vec<f64> {
    let (w1, b1, w2, b2) = (
        store.get(ids[0]).data(),
        store.get(ids[1]).data(),
        store.get(ids[2]).data(),
        store.get(ids[3]).data(),
    );
    let mut out = Vec::new();
    for row in x.chunks_exact(d_in) {
        let hid: Vec<f64> = (0..h)
            .map(|j| (b1[j] + (0..d_in).map(|i| row[i] * w1[i * h + j]).sum::<f64>()).tanh())
            .collect();
        out.extend((0..d_out).map(|o| b2[o] + (0..h).map(|j| hid[j] * w2[j * d_out + o]).sum::<f64>()));
    }
    out
}

impl FrozenOracle {
    pub fn new(vae: &RqVae, x: Vec<f64>, beta: f64) -> Self {
        let cfg = vae.config();
        let (d, h, ld, k) = (vae.input_dim(), cfg.hidden, cfg.latent_dim, cfg.k);
        let n = x.len() / d;
        let store = vae.store();
        let books = vae.codebook_ids().to_vec();
        let z = mlp(store, vae.encoder_ids(), &x, d, h, ld);
        let mut res = z.clone();
        let mut codes = vec![Vec::new(); n];
        let (mut r_sg, mut e_sg) = (Vec::new(), Vec::new());
        let mut zq = vec![0.0; n * ld];
        for &b in &books {
            let table = store.get(b).data();
            r_sg.push(res.clone());
            let mut e = Vec::with_capacity(n * ld);
            for (i, row) in res.chunks_exact_mut(ld).enumerate() {
                let dists: Vec<f64> = (0..k).map(|c| sq_dist(row, &table[c * ld..(c + 1) * ld])).collect();
                let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                let c = dists.iter().position(|&v| v == min).unwrap();
                codes[i].push(c);
                let cen = &table[c * ld..(c + 1) * ld];
                e.extend_from_slice(cen);
                for (j, (v, m)) in row.iter_mut().zip(cen).enumerate() {
                    *v -= m;
                    zq[i * ld + j] += m;
                }
            }
            e_sg.push(e);
        }
        let gap = zq.iter().zip(&z).map(|(a, b)| a - b).collect();
        Self { x, n, d, h, ld, k, beta, enc: vae.encoder_ids(), dec: vae.decoder_ids(), books, codes, r_sg, e_sg, gap }
    }

    pub fn loss(&self, store: &ParamStore) -> f64 {
        let z = mlp(store, self.enc, &self.x, self.d, self.h, self.ld);
        let mut r = z.clone();
        let (mut cb, mut commit) = (0.0, 0.0);
        for (l, &b) in self.books.iter().enumerate() {
            let table = store.get(b).data();
            assert_eq!(table.len(), self.k * self.ld);
            for i in 0..self.n {
                let c = self.codes[i][l];
                for j in 0..self.ld {
                    let idx = i * self.ld + j;
                    cb += (self.r_sg[l][idx] - table[c * self.ld + j]).powi(2);
                    commit += (r[idx] - self.e_sg[l][idx]).powi(2);
                }
            }
            for (v, e) in r.iter_mut().zip(&self.e_sg[l]) {
                *v -= e;
            }
        }
        let zst: Vec<f64> = z.iter().zip(&self.gap).map(|(a, b)| a + b).collect();
        let xhat = mlp(store, self.dec, &zst, self.ld, self.h, self.d);
        let reco = sq_dist(&self.x, &xhat);
        (reco + cb + self.beta * commit) / self.n as f64
    }
}

pub fn small_vae(beta: f64) -> (RqVae, Vec<f64>) {
    let c = generate_catalog(14, 40, 6, 4).unwrap();
    let x: Vec<f64> = c.embedding_matrix()[..10 * 6].to_vec();
    let cfg = RqVaeConfig { hidden: 5, latent_dim: 3, n_levels: 2, k: 4, beta_commit: beta, ..Default::default() };
    let mut vae = RqVae::new(6, cfg, 2).unwrap();
    vae.warm_start(&c.embedding_matrix(), 2).unwrap();
    (vae, x)
}

/// A one-layer policy over a toy vocabulary.
pub fn toy_policy(seed: u64) -> Policy {
    let layout = VocabLayout::new(4, 3, 3, 0);
    let cfg = PolicyConfig {
        n_layers: 1,
        width: 8,
        n_heads: 2,
        ff_width: 12,
        max_len: 16,
        seed,
        tie_embeddings: true,
    };
    Policy::init(cfg, layout).unwrap()
}

pub fn toy_group(policy: &Policy, adv: [f64; 2], old_shift: [f64; 2], ref_shift: [f64; 2]) -> RolloutGroup {
    let l = policy.layout();
    let prompt = vec![BOS, l.task_token(Task::GenerativeRetrieval), l.sid_token(0, 1), SEP];
    let completions = vec![
        vec![l.sid_token(0, 0), l.sid_token(1, 2), l.sid_token(2, 1), EOS],
        vec![l.sid_token(0, 2), l.sid_token(1, 0), EOS],
    ];
    let lp = token_log_probs(policy, policy.store(), &prompt, &completions).unwrap();
    let shift = |s: f64| lp.iter().map(|v| v.iter().enumerate().map(|(t, x)| x + s * (t as f64 + 1.0)).collect()).collect();
    let mut g = RolloutGroup {
        task: Task::GenerativeRetrieval,
        prompt,
        completions,
        items: vec![0, 1],
        old_log_probs: shift(0.0),
        ref_log_probs: shift(0.0),
        rewards: rule_only_reward(&[0, 1], 0),
        advantages: adv.to_vec(),
        diversity: diversity(&[0, 1]),
    };
    for i in 0..2 {
        for (t, x) in g.old_log_probs[i].iter_mut().enumerate() {
            *x += old_shift[i] * (t as f64 + 1.0);
        }
        for (t, x) in g.ref_log_probs[i].iter_mut().enumerate() {
            *x += ref_shift[i] * (t as f64 + 1.0);
        }
    }
    g
}

pub fn with_eos(path: &[u32]) -> Vec<u32> {
    let mut p = path.to_vec();
    p.push(EOS);
    p
}

/// Every item scored independently, then sorted by score and token order.
pub fn exhaustive_ranking(trie: &Trie, mut score: impl FnMut(&[u32]) -> f64) -> Vec<(u32, f64)> {
    let mut all: Vec<(f64, Vec<u32>, u32)> = trie
        .paths()
        .into_iter()
        .map(|(p, item)| {
            let full = with_eos(&p);
            (score(&full), full, item)
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    all.into_iter().map(|(s, _, i)| (i, s)).collect()
}


//! KV-cached forward pass used for decoding and scoring.

use minirec_autodiff::gelu;
use minirec_autodiff::gemm::{gemm, MatMut, MatRef};

use super::{LayerIds, Policy, LN_EPS};
use crate::error::{Error, Result};

/// Keys and values of every processed position, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// `x W` for row-major `x: [m, k]`, `w: [k, n]`.
fn matmul(x: &[f64], m: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        MatRef::dense(x, k, false),
        MatRef::dense(w, n, false),
        0.0,
        MatMut::dense(&mut out, n),
    );
    out
}

fn layer_norm(x: &[f64], width: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * is * gain[j] + bias[j];
        }
    }
    out
}

impl Policy {
    fn param_data(&self, id: minirec_autodiff::ParamId) -> &[f64] {
        self.store.get(id).data()
    }

    /// Runs `rows` new positions through one layer for each cache. `x` holds
    /// the rows of every cache back to back, `counts[c]` of them for cache `c`.
    fn layer_forward(&self, l: usize, ids: &LayerIds, x: &mut [f64], caches: &mut [&mut KvCache], counts: &[usize]) {
        let w = self.config.width;
        let heads = self.config.n_heads;
        let dh = w / heads;
        let m = x.len() / w;
        let scale = 1.0 / (dh as f64).sqrt();
        let a = layer_norm(x, w, self.param_data(ids.ln1_g), self.param_data(ids.ln1_b));
        let q = matmul(&a, m, w, self.param_data(ids.wq), w);
        let k = matmul(&a, m, w, self.param_data(ids.wk), w);
        let v = matmul(&a, m, w, self.param_data(ids.wv), w);
        let mut att = vec![0.0; m * w];
        let mut row0 = 0;
        for (cache, &cnt) in caches.iter_mut().zip(counts) {
            let base = cache.len;
            cache.keys[l].extend_from_slice(&k[row0 * w..(row0 + cnt) * w]);
            cache.values[l].extend_from_slice(&v[row0 * w..(row0 + cnt) * w]);
            let (ks, vs) = (&cache.keys[l], &cache.values[l]);
            let mut scores = vec![0.0; base + cnt];
            for i in 0..cnt {
                let r = row0 + i;
                let visible = base + i + 1;
                for h in 0..heads {
                    let qh = &q[r * w + h * dh..r * w + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores[..visible].iter_mut().enumerate() {
                        let kh = &ks[j * w + h * dh..j * w + (h + 1) * dh];
                        *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores[..visible].iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let out = &mut att[r * w + h * dh..r * w + (h + 1) * dh];
                    for (j, s) in scores[..visible].iter().enumerate() {
                        let p = s / z;
                        for (o, vv) in out.iter_mut().zip(&vs[j * w + h * dh..j * w + (h + 1) * dh]) {
                            *o += p * vv;
                        }
                    }
                }
            }
            row0 += cnt;
        }
        let proj = matmul(&att, m, w, self.param_data(ids.wo), w);
        for (xi, p) in x.iter_mut().zip(&proj) {
            *xi += p;
        }
        let f = self.config.ff_width;
        let b = layer_norm(x, w, self.param_data(ids.ln2_g), self.param_data(ids.ln2_b));
        let mut hdn = matmul(&b, m, w, self.param_data(ids.w1), f);
        let b1 = self.param_data(ids.b1);
        for row in hdn.chunks_mut(f) {
            for (h, bb) in row.iter_mut().zip(b1) {
                *h = gelu(*h + bb);
            }
        }
        let out = matmul(&hdn, m, f, self.param_data(ids.w2), w);
        let b2 = self.param_data(ids.b2);
        for (row, orow) in x.chunks_mut(w).zip(out.chunks(w)) {
            for ((xi, o), bb) in row.iter_mut().zip(orow).zip(b2) {
                *xi += o + bb;
            }
        }
    }

    /// Feeds `tokens[c]` to cache `c` and returns the logits after the last
    /// token of each.
    fn extend(&self, caches: &mut [&mut KvCache], tokens: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let w = self.config.width;
        let counts: Vec<usize> = tokens.iter().map(|t| t.len()).collect();
        let mut x = Vec::with_capacity(counts.iter().sum::<usize>() * w);
        let tok = self.param_data(self.ids.tok_emb);
        let pos = self.param_data(self.ids.pos_emb);
        for (cache, toks) in caches.iter().zip(tokens) {
            if toks.is_empty() {
                return Err(Error::invalid("no tokens to feed"));
            }
            if cache.len + toks.len() > self.config.max_len {
                return Err(Error::invalid(format!(
                    "sequence of {} tokens exceeds max length {}",
                    cache.len + toks.len(),
                    self.config.max_len
                )));
            }
            for (i, &t) in toks.iter().enumerate() {
                if t as usize >= self.layout.size() {
                    return Err(Error::UnknownToken {
                        token: t,
                        vocab_size: self.layout.size(),
                    });
                }
                let p = cache.len + i;
                x.extend(
                    tok[t as usize * w..(t as usize + 1) * w]
                        .iter()
                        .zip(&pos[p * w..(p + 1) * w])
                        .map(|(a, b)| a + b),
                );
            }
        }
        for (l, ids) in self.ids.layers.iter().enumerate() {
            self.layer_forward(l, ids, &mut x, caches, &counts);
        }
        for (cache, &cnt) in caches.iter_mut().zip(&counts) {
            cache.len += cnt;
        }
        // only the last row of every cache needs logits
        let mut last = Vec::with_capacity(caches.len() * w);
        let mut end = 0;
        for &cnt in &counts {
            end += cnt;
            last.extend_from_slice(&x[(end - 1) * w..end * w]);
        }
        let h = layer_norm(&last, w, self.param_data(self.ids.lnf_g), self.param_data(self.ids.lnf_b));
        let v = self.layout.size();
        let table = self.param_data(self.ids.head.unwrap_or(self.ids.tok_emb));
        let mut logits = vec![0.0; caches.len() * v];
        gemm(
            caches.len(),
            w,
            v,
            1.0,
            MatRef::dense(&h, w, false),
            MatRef::dense(table, w, true),
            0.0,
            MatMut::dense(&mut logits, v),
        );
        Ok(logits.chunks(v).map(|r| r.to_vec()).collect())
    }

    pub fn empty_cache(&self) -> KvCache {
        let n = self.config.n_layers;
        KvCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Processes a prompt; returns the cache and the next-token logits.
    pub fn prefill(&self, prompt: &[u32]) -> Result<(KvCache, Vec<f64>)> {
        let mut cache = self.empty_cache();
        let logits = self.extend(&mut [&mut cache], &[prompt])?.remove(0);
        Ok((cache, logits))
    }

    /// Appends one token; returns the next-token logits.
    pub fn step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f64>> {
        Ok(self.extend(&mut [cache], &[&[token]])?.remove(0))
    }

    /// Feeds a run of tokens to every cache, evaluated together; returns the
    /// logits after each cache's last token.
    pub fn feed_batch(&self, caches: &mut [&mut KvCache], tokens: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        if caches.len() != tokens.len() {
            return Err(Error::invalid("one token run per cache required"));
        }
        if caches.is_empty() {
            return Ok(Vec::new());
        }
        self.extend(caches, tokens)
    }

    /// One token per cache, evaluated together.
    pub fn step_batch(&self, caches: &mut [&mut KvCache], tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        if caches.len() != tokens.len() {
            return Err(Error::invalid("one token per cache required"));
        }
        if caches.is_empty() {
            return Ok(Vec::new());
        }
        let singles: Vec<[u32; 1]> = tokens.iter().map(|&t| [t]).collect();
        let refs: Vec<&[u32]> = singles.iter().map(|s| s.as_slice()).collect();
        self.extend(caches, &refs)
    }
}

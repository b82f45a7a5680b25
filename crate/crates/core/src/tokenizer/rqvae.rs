//! Residual-quantized autoencoder.
//!
//! The loss is reconstruction plus, per level,
//! `||sg[r_l] - e_l||^2 + beta * ||r_l - sg[e_l]||^2`, averaged over the
//! batch. Decoder gradients reach the encoder through the straight-through
//! estimator `z + sg[z_q - z]`.

use minirec_autodiff::{
    adamw_step, AdamWConfig, AutodiffError, Graph, LrSchedule, OptimizerState, ParamId, ParamStore, Tensor, Var,
};
use rand::seq::SliceRandom;

use super::codebook::Codebook;
use super::kmeans::{kmeans, nearest};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct RqVaeConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub n_levels: usize,
    pub k: usize,
    pub beta_commit: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Lloyd iterations for the warm start.
    pub warm_start_iters: usize,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            latent_dim: 8,
            n_levels: 3,
            k: 32,
            beta_commit: 0.25,
            steps: 300,
            batch_size: 64,
            lr: 1e-3,
            warm_start_iters: 20,
        }
    }
}

#[derive(Clone, Debug)]
struct Ids {
    enc: [ParamId; 4],
    dec: [ParamId; 4],
    codebooks: Vec<ParamId>,
}

/// Encoder `tanh(x W1 + b1) W2 + b2`, a decoder of the same shape, and the
/// latent codebooks, all in one parameter store.
#[derive(Clone, Debug)]
pub struct RqVae {
    config: RqVaeConfig,
    input_dim: usize,
    store: ParamStore,
    ids: Ids,
}

/// Loss graph nodes for one batch.
pub struct RqVaeLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub latent: Var,
    pub codes: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RqVaeReport {
    pub loss_history: Vec<f64>,
    /// Set when training stopped on a non-finite value; parameters are those
    /// of the last finite step.
    pub aborted: Option<String>,
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(store, w)?;
    let b = g.param(store, b)?;
    let h = g.matmul(x, w)?;
    Ok(g.add(h, b)?)
}

impl RqVae {
    pub fn new(input_dim: usize, config: RqVaeConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || config.hidden == 0 || config.latent_dim == 0 || config.n_levels == 0 || config.k == 0 {
            return Err(Error::invalid("RQ-VAE dimensions and codebook sizes must be positive"));
        }
        let mut r = rng::stream(seed, rng::RQVAE);
        let mut store = ParamStore::new();
        let mut mlp = |store: &mut ParamStore, name: &str, d_in: usize, d_out: usize| {
            let h = config.hidden;
            [
                store.add(format!("{name}.w1"), Tensor::randn(&[d_in, h], (1.0 / d_in as f64).sqrt(), &mut r), true),
                store.add(format!("{name}.b1"), Tensor::zeros(&[h]), false),
                store.add(format!("{name}.w2"), Tensor::randn(&[h, d_out], (1.0 / h as f64).sqrt(), &mut r), true),
                store.add(format!("{name}.b2"), Tensor::zeros(&[d_out]), false),
            ]
        };
        let enc = mlp(&mut store, "encoder", input_dim, config.latent_dim);
        let dec = mlp(&mut store, "decoder", config.latent_dim, input_dim);
        let codebooks = (0..config.n_levels)
            .map(|l| store.add(format!("codebook.{l}"), Tensor::zeros(&[config.k, config.latent_dim]), false))
            .collect();
        Ok(Self {
            config,
            input_dim,
            store,
            ids: Ids { enc, dec, codebooks },
        })
    }

    pub fn config(&self) -> &RqVaeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn encoder_ids(&self) -> [ParamId; 4] {
        self.ids.enc
    }

    pub fn decoder_ids(&self) -> [ParamId; 4] {
        self.ids.dec
    }

    pub fn codebook_ids(&self) -> &[ParamId] {
        &self.ids.codebooks
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let levels = self.ids.codebooks.iter().map(|&id| self.store.get(id).data().to_vec()).collect();
        Codebook::new(levels, self.config.k, self.config.latent_dim, self.config.beta_commit)
    }

    fn mlp(&self, g: &mut Graph, store: &ParamStore, x: Var, ids: [ParamId; 4]) -> Result<Var> {
        let h = linear(g, store, x, ids[0], ids[1])?;
        let h = g.tanh(h)?;
        linear(g, store, h, ids[2], ids[3])
    }

    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.mlp(g, store, x, self.ids.enc)
    }

    pub fn decode_graph(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        self.mlp(g, store, z, self.ids.dec)
    }

    /// Latent vectors for the rows of `x` (`[n, input_dim]`).
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(self.batch_tensor(x)?)?;
        let z = self.encode_graph(&mut g, &self.store, xv)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = z.len() / self.config.latent_dim;
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(vec![n, self.config.latent_dim], z.to_vec())?)?;
        let out = self.decode_graph(&mut g, &self.store, zv)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Decoder applied to the sum of the selected latent centroids.
    pub fn reconstruct(&self, codes: &[u32]) -> Result<Vec<f64>> {
        let zq = super::sid::reconstruct(codes, &self.codebook()?)?;
        self.decode(&zq)
    }

    fn batch_tensor(&self, x: &[f64]) -> Result<Tensor> {
        if x.is_empty() || x.len() % self.input_dim != 0 {
            return Err(Error::invalid(format!("batch is not a [n, {}] matrix", self.input_dim)));
        }
        Ok(Tensor::new(vec![x.len() / self.input_dim, self.input_dim], x.to_vec())?)
    }

    /// Builds the loss for a batch against the parameters in `store`.
    ///
    /// Codes are chosen greedily from the current latent and codebook values
    /// and enter the graph as constant indices.
    pub fn loss_graph(&self, g: &mut Graph, store: &ParamStore, x: &[f64]) -> Result<RqVaeLoss> {
        let xt = self.batch_tensor(x)?;
        let n = xt.rows();
        let (kk, ld) = (self.config.k, self.config.latent_dim);
        let xv = g.constant(xt)?;
        let z = self.encode_graph(g, store, xv)?;
        let zvals = g.value(z).data().to_vec();
        let mut residual = zvals.clone();
        let mut codes = vec![Vec::with_capacity(self.config.n_levels); n];
        let mut r = z;
        let mut zq: Option<Var> = None;
        let mut codebook_terms = Vec::new();
        let mut commit_terms = Vec::new();
        for &cb_id in &self.ids.codebooks {
            let table = store.get(cb_id).data();
            let mut idx = Vec::with_capacity(n);
            for (i, row) in residual.chunks_exact_mut(ld).enumerate() {
                let (c, _) = nearest(table, ld, row);
                for (v, m) in row.iter_mut().zip(&table[c * ld..(c + 1) * ld]) {
                    *v -= m;
                }
                codes[i].push(c as u32);
                idx.push(c);
            }
            debug_assert!(idx.iter().all(|&c| c < kk));
            let cb = g.param(store, cb_id)?;
            let e = g.gather(cb, &idx)?;
            let r_sg = g.detach(r)?;
            let e_sg = g.detach(e)?;
            codebook_terms.push(g.squared_error(r_sg, e)?);
            commit_terms.push(g.squared_error(r, e_sg)?);
            r = g.sub(r, e_sg)?;
            zq = Some(match zq {
                None => e,
                Some(acc) => g.add(acc, e)?,
            });
        }
        let zq = zq.expect("at least one level");
        let gap = g.sub(zq, z)?;
        let gap = g.detach(gap)?;
        let z_st = g.add(z, gap)?;
        let xhat = self.decode_graph(g, store, z_st)?;
        let inv_n = 1.0 / n as f64;
        let reco = g.squared_error(xv, xhat)?;
        let reco = g.scale(reco, inv_n)?;
        let sum_terms = |g: &mut Graph, terms: Vec<Var>| -> Result<Var> {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = g.add(acc, *t)?;
            }
            Ok(g.scale(acc, inv_n)?)
        };
        let codebook = sum_terms(g, codebook_terms)?;
        let commitment = sum_terms(g, commit_terms)?;
        let weighted = g.scale(commitment, self.config.beta_commit)?;
        let total = g.add(reco, codebook)?;
        let total = g.add(total, weighted)?;
        Ok(RqVaeLoss {
            total,
            reconstruction: reco,
            codebook,
            commitment,
            latent: z,
            codes,
        })
    }

    /// Seeds every level's codebook with k-means of that level's latent
    /// residuals on `x`.
    pub fn warm_start(&mut self, x: &[f64], seed: u64) -> Result<()> {
        let ld = self.config.latent_dim;
        let mut residual = self.encode(x)?;
        let mut r = rng::stream(seed, rng::KMEANS);
        for l in 0..self.config.n_levels {
            let km = kmeans(&residual, ld, self.config.k, self.config.warm_start_iters, &mut r)?;
            for (row, &c) in residual.chunks_exact_mut(ld).zip(&km.assignments) {
                for (v, m) in row.iter_mut().zip(&km.centroids[c * ld..(c + 1) * ld]) {
                    *v -= m;
                }
            }
            let id = self.ids.codebooks[l];
            self.store.get_mut(id).data_mut().copy_from_slice(&km.centroids);
        }
        Ok(())
    }

    /// SIDs of the rows of `x` under the current encoder and codebook.
    pub fn codes(&self, x: &[f64]) -> Result<Vec<Vec<u32>>> {
        let z = self.encode(x)?;
        let cb = self.codebook()?;
        z.chunks_exact(self.config.latent_dim)
            .map(|row| Ok(super::sid::quantize(row, &cb)?.0))
            .collect()
    }

    /// Latent vectors used for SID assignment.
    pub fn latents(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encode(x)
    }
}

/// Warm-starts on the first batch, then trains with AdamW.
pub fn train_rq_vae(embeddings: &[f64], dim: usize, config: RqVaeConfig, seed: u64) -> Result<(RqVae, RqVaeReport)> {
    let mut model = RqVae::new(dim, config, seed)?;
    let n = embeddings.len() / dim;
    if n == 0 || embeddings.len() % dim != 0 {
        return Err(Error::invalid("embeddings must be a non-empty [n, dim] matrix"));
    }
    let bs = model.config.batch_size.clamp(1, n);
    let mut r = rng::stream(seed, rng::RQVAE);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let gather_rows = |rows: &[usize]| -> Vec<f64> {
        rows.iter().flat_map(|&i| embeddings[i * dim..(i + 1) * dim].iter().copied()).collect()
    };
    model.warm_start(&gather_rows(&order[..bs]), seed)?;
    let mut opt = OptimizerState::new(
        &model.store,
        AdamWConfig::default(),
        LrSchedule::Constant { lr: model.config.lr },
    );
    let mut report = RqVaeReport::default();
    let mut cursor = bs;
    for step in 0..model.config.steps {
        if cursor + bs > n {
            order.shuffle(&mut r);
            cursor = 0;
        }
        let batch = gather_rows(&order[cursor..cursor + bs]);
        cursor += bs;
        let mut g = Graph::new();
        let outcome = model
            .loss_graph(&mut g, &model.store, &batch)
            .and_then(|loss| Ok((g.value(loss.total).item(), g.backward(loss.total)?)));
        let (value, grads) = match outcome {
            Ok(v) => v,
            Err(Error::Autodiff(e @ (AutodiffError::NonFinite { .. } | AutodiffError::NonFiniteGradient { .. }))) => {
                log::warn!("RQ-VAE training stopped at step {step}: {e}");
                report.aborted = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let lr = model.config.lr;
        if let Err(e) = adamw_step(&mut model.store, &grads, &mut opt, lr) {
            report.aborted = Some(format!("step {step}: {e}"));
            break;
        }
        report.loss_history.push(value);
    }
    Ok((model, report))
}

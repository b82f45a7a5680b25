//! Semantic IDs by residual quantization of item embeddings.

mod codebook;
mod kmeans;
mod rqvae;
mod sid;

pub use codebook::{Codebook, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use kmeans::{kmeans, nearest, train_rq_kmeans, KMeansResult, RqKMeansTrace};
pub use rqvae::{train_rq_vae, RqVae, RqVaeConfig, RqVaeLoss, RqVaeReport};
pub use sid::{assign_all, disambiguate_collisions, quantize, reconstruct, SidAssignment, SidTable};

use crate::catalog::Catalog;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    RqKMeans,
    RqVae,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    pub n_levels: usize,
    pub k: usize,
    pub lloyd_iters: usize,
    pub beta_commit: f64,
    /// Used only by the autoencoder path; its level count, K and commitment
    /// weight are taken from the fields above.
    pub rqvae: RqVaeConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            kind: TokenizerKind::RqKMeans,
            n_levels: 3,
            k: 32,
            lloyd_iters: 50,
            beta_commit: 0.25,
            rqvae: RqVaeConfig::default(),
        }
    }
}

pub struct FittedTokenizer {
    pub codebook: Codebook,
    pub sids: SidTable,
    pub kmeans_trace: Option<RqKMeansTrace>,
    pub rqvae: Option<(RqVae, RqVaeReport)>,
}

/// Trains the configured quantizer on the catalog and assigns every item a
/// disambiguated SID.
pub fn fit_tokenizer(catalog: &Catalog, config: &TokenizerConfig, seed: u64) -> Result<FittedTokenizer> {
    let x = catalog.embedding_matrix();
    match config.kind {
        TokenizerKind::RqKMeans => {
            let (codebook, trace) = train_rq_kmeans(
                &x,
                catalog.dim(),
                config.n_levels,
                config.k,
                config.lloyd_iters,
                seed,
                config.beta_commit,
            )?;
            let sids = SidTable::from_codebook(&x, &codebook)?;
            Ok(FittedTokenizer {
                codebook,
                sids,
                kmeans_trace: Some(trace),
                rqvae: None,
            })
        }
        TokenizerKind::RqVae => {
            let vae_cfg = RqVaeConfig {
                n_levels: config.n_levels,
                k: config.k,
                beta_commit: config.beta_commit,
                ..config.rqvae.clone()
            };
            let (model, report) = train_rq_vae(&x, catalog.dim(), vae_cfg, seed)?;
            let codebook = model.codebook()?;
            let sids = SidTable::from_codebook(&model.latents(&x)?, &codebook)?;
            Ok(FittedTokenizer {
                codebook,
                sids,
                kmeans_trace: None,
                rqvae: Some((model, report)),
            })
        }
    }
}

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, ByteReader, ByteWriter};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"MRCB";
pub const CODEBOOK_VERSION: u32 = 1;

/// Per-level centroid tables for residual quantization.
///
/// Level `l` is a row-major `[k, dim]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    levels: Vec<Vec<f64>>,
    k: usize,
    dim: usize,
    beta_commit: f64,
}

impl Codebook {
    pub fn new(levels: Vec<Vec<f64>>, k: usize, dim: usize, beta_commit: f64) -> Result<Self> {
        if levels.is_empty() || k == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs at least one level, one code and one dimension"));
        }
        for (l, c) in levels.iter().enumerate() {
            if c.len() != k * dim {
                return Err(Error::invalid(format!(
                    "level {l} holds {} values, expected {k} x {dim}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "centroid",
                    detail: format!("level {l}"),
                });
            }
        }
        if !beta_commit.is_finite() || beta_commit < 0.0 {
            return Err(Error::invalid("beta_commit must be finite and nonnegative"));
        }
        Ok(Self {
            levels,
            k,
            dim,
            beta_commit,
        })
    }

    pub fn zeros(n_levels: usize, k: usize, dim: usize) -> Self {
        Self {
            levels: vec![vec![0.0; k * dim]; n_levels],
            k,
            dim,
            beta_commit: 0.25,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta_commit(&self) -> f64 {
        self.beta_commit
    }

    pub fn level(&self, l: usize) -> &[f64] {
        &self.levels[l]
    }

    pub fn centroid(&self, l: usize, code: usize) -> &[f64] {
        &self.levels[l][code * self.dim..(code + 1) * self.dim]
    }

    pub fn centroid_mut(&mut self, l: usize, code: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.levels[l][code * d..(code + 1) * d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CODEBOOK_MAGIC);
        w.u32(CODEBOOK_VERSION);
        w.u32(self.levels.len() as u32);
        w.u32(self.k as u32);
        w.u32(self.dim as u32);
        w.f64(self.beta_commit);
        for level in &self.levels {
            w.f64s(level);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "codebook");
        let magic = r.take(4)?;
        if magic != CODEBOOK_MAGIC {
            return Err(Error::Format {
                context: "codebook".into(),
                offset: 0,
                detail: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Incompatible {
                what: "codebook version",
                expected: CODEBOOK_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let n_levels = r.u32()? as usize;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let beta_at = r.offset();
        let beta = r.f64()?;
        if n_levels == 0 || k == 0 || dim == 0 {
            return Err(r.error("zero levels, codes or dimension"));
        }
        let per_level = k.checked_mul(dim).ok_or_else(|| r.error("codebook size overflows"))?;
        let mut levels = Vec::with_capacity(n_levels.min(64));
        for _ in 0..n_levels {
            let at = r.offset();
            let vals = r.f64s(per_level)?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format {
                    context: "codebook".into(),
                    offset: at,
                    detail: "non-finite centroid value".into(),
                });
            }
            levels.push(vals);
        }
        r.expect_end()?;
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::Format {
                context: "codebook".into(),
                offset: beta_at,
                detail: "invalid commitment weight".into(),
            });
        }
        Self::new(levels, k, dim, beta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_bytes(path)?)
    }
}

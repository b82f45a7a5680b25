use std::path::Path;

use minirec_autodiff::{AdamWConfig, LrSchedule, OptimizerState, ParamStore, Tensor};

use super::{Policy, PolicyConfig};
use crate::error::{Error, Result};
use crate::io::{self, ByteReader, ByteWriter};
use crate::vocab::VocabLayout;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_TENSORS: usize = 4096;
const MAX_DIMS: usize = 8;

/// Policy parameters plus optional optimizer state and training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub policy: Policy,
    pub optimizer: Option<OptimizerState>,
    pub epochs_done: u64,
}

fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.u32(t.ndim() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f64s(t.data());
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let ndim = r.u32()? as usize;
    if ndim > MAX_DIMS {
        return Err(r.error(format!("tensor rank {ndim} too large")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.error("tensor size overflows"))?;
    let at = r.offset();
    let data = r.f64s(n)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            context: "checkpoint".into(),
            offset: at,
            detail: "non-finite tensor value".into(),
        });
    }
    Ok(Tensor::new(shape, data)?)
}

impl Checkpoint {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            optimizer: None,
            epochs_done: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let c = self.policy.config();
        for v in [c.n_layers, c.width, c.n_heads, c.ff_width, c.max_len] {
            w.u32(v as u32);
        }
        w.u64(c.seed);
        w.u8(c.tie_embeddings as u8);
        let l = self.policy.layout();
        for v in [l.n_words, l.n_levels, l.k, l.n_suffix] {
            w.u32(v as u32);
        }
        w.str(&l.hash());
        let store = self.policy.store();
        w.u32(store.len() as u32);
        for (id, name, t) in store.iter() {
            w.str(name);
            w.u8(store.decays(id) as u8);
            write_tensor(&mut w, t);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.step);
                for v in [opt.config.beta1, opt.config.beta2, opt.config.eps, opt.config.weight_decay] {
                    w.f64(v);
                }
                match opt.schedule {
                    LrSchedule::Constant { lr } => {
                        w.u8(0);
                        w.f64(lr);
                    }
                    LrSchedule::Cosine { base_lr, total_steps } => {
                        w.u8(1);
                        w.f64(base_lr);
                        w.u64(total_steps);
                    }
                }
                for t in opt.m.iter().chain(&opt.v) {
                    write_tensor(&mut w, t);
                }
            }
        }
        w.u64(self.epochs_done);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                context: "checkpoint".into(),
                offset: 0,
                detail: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible {
                what: "checkpoint version",
                expected: CHECKPOINT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let seed = r.u64()?;
        let tie_embeddings = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(r.error("bad tie flag")),
        };
        let config = PolicyConfig {
            n_layers: dims[0],
            width: dims[1],
            n_heads: dims[2],
            ff_width: dims[3],
            max_len: dims[4],
            seed,
            tie_embeddings,
        };
        let mut ld = [0usize; 4];
        for d in ld.iter_mut() {
            *d = r.u32()? as usize;
        }
        let layout = VocabLayout::new(ld[0], ld[1], ld[2], ld[3]);
        let hash = r.str()?;
        if hash != layout.hash() {
            return Err(Error::Incompatible {
                what: "vocabulary layout hash",
                expected: layout.hash(),
                found: hash,
            });
        }
        let n = r.u32()? as usize;
        if n > MAX_TENSORS {
            return Err(r.error(format!("{n} tensors is implausible")));
        }
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let decay = r.u8()? != 0;
            let t = read_tensor(&mut r)?;
            if store.find(&name).is_some() {
                return Err(r.error(format!("duplicate tensor {name}")));
            }
            store.add(name, t, decay);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let cfg = AdamWConfig {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let schedule = match r.u8()? {
                    0 => LrSchedule::Constant { lr: r.f64()? },
                    1 => LrSchedule::Cosine {
                        base_lr: r.f64()?,
                        total_steps: r.u64()?,
                    },
                    _ => return Err(r.error("unknown schedule tag")),
                };
                let mut moments = Vec::with_capacity(2 * n);
                for i in 0..2 * n {
                    let at = r.offset();
                    let t = read_tensor(&mut r)?;
                    let (_, _, p) = store.iter().nth(i % n).expect("index below count");
                    if t.shape() != p.shape() {
                        return Err(Error::Format {
                            context: "checkpoint".into(),
                            offset: at,
                            detail: "optimizer moment shape differs from its parameter".into(),
                        });
                    }
                    moments.push(t);
                }
                let v = moments.split_off(n);
                Some(OptimizerState {
                    config: cfg,
                    schedule,
                    step,
                    m: moments,
                    v,
                })
            }
            _ => return Err(r.error("bad optimizer flag")),
        };
        let epochs_done = r.u64()?;
        r.expect_end()?;
        let policy = Policy::from_parts(config, layout, store)?;
        Ok(Self {
            policy,
            optimizer,
            epochs_done,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_bytes(path)?)
    }

    /// Loads and checks that the checkpoint matches the expected vocabulary
    /// layout and architecture.
    pub fn load_expecting(path: &Path, layout: &VocabLayout, config: &PolicyConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_compatible(layout, config)?;
        Ok(ck)
    }

    pub fn check_compatible(&self, layout: &VocabLayout, config: &PolicyConfig) -> Result<()> {
        if self.policy.layout().hash() != layout.hash() {
            return Err(Error::Incompatible {
                what: "vocabulary layout hash",
                expected: layout.hash(),
                found: self.policy.layout().hash(),
            });
        }
        let mine = self.policy.config();
        let arch = |c: &PolicyConfig| (c.n_layers, c.width, c.n_heads, c.ff_width, c.max_len, c.tie_embeddings);
        if arch(mine) != arch(config) {
            return Err(Error::Incompatible {
                what: "policy architecture",
                expected: format!("{:?}", arch(config)),
                found: format!("{:?}", arch(mine)),
            });
        }
        Ok(())
    }
}

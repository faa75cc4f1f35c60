//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "FACKPT\0\0"
//! version          u32      = 1
//! model config     u32 length + JSON
//! branch config    u32 length + JSON (length 0 for a raster model)
//! step             u64      completed optimizer steps
//! rng flag         u8       1 if an RNG state follows
//!   seed           32 bytes
//!   stream         u64
//!   word position  u128
//! tensor count     u32
//!   name           u16 length + UTF-8
//!   rank           u8
//!   dims           rank x u32
//!   data           f32 x product(dims)
//! optimizer flag   u8       1 if optimizer state follows
//!   config         4 x f32  beta1, beta2, eps, weight decay
//!   step           u64
//!   entry count    u32
//!     name         u16 length + UTF-8
//!     step         u64
//!     length       u32
//!     m, v         f32 x length each
//! ```
//!
//! Tensors appear in the model's canonical parameter order, so equal models
//! serialize to equal bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Backbone, BranchConfig, DualHeadModel, ModelConfig};
use crate::nn::{AdamW, AdamWConfig, Moments, Tensor};
use crate::rng::{self, RngState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FACKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub branch: Option<BranchConfig>,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub rng: Option<RngState>,
}

fn named(visit: impl FnOnce(&mut dyn FnMut(String, &Tensor<f32>))) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    visit(&mut |n, t| out.push((n, t.clone())));
    out
}

impl Checkpoint {
    pub fn from_raster(model: &Backbone<f32>, optimizer: Option<AdamW>, step: u64, rng: Option<RngState>) -> Self {
        Self {
            model_config: model.config.clone(),
            branch: None,
            tensors: named(|f| model.weights.visit(f)),
            optimizer,
            step,
            rng,
        }
    }

    pub fn from_dual(model: &DualHeadModel<f32>, optimizer: Option<AdamW>, step: u64, rng: Option<RngState>) -> Self {
        Self {
            model_config: model.config.clone(),
            branch: Some(model.branch),
            tensors: named(|f| model.weights.visit(f)),
            optimizer,
            step,
            rng,
        }
    }

    pub fn is_dual(&self) -> bool {
        self.branch.is_some()
    }

    /// Overwrites every slot of a skeleton with the stored tensor of the
    /// same name; the two name sets must match exactly.
    fn fill(&self, skeleton_names: Vec<String>, visit_mut: impl FnOnce(&mut dyn FnMut(String, &mut Tensor<f32>))) -> Result<()> {
        let stored: BTreeSet<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        let wanted: BTreeSet<&str> = skeleton_names.iter().map(String::as_str).collect();
        if stored != wanted || stored.len() != self.tensors.len() {
            let missing: Vec<_> = wanted.difference(&stored).take(3).collect();
            let extra: Vec<_> = stored.difference(&wanted).take(3).collect();
            return Err(Error::NameSetMismatch(format!(
                "missing {missing:?}, unexpected {extra:?} ({} stored, {} expected)",
                self.tensors.len(),
                wanted.len()
            )));
        }
        let by_name: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        visit_mut(&mut |name, slot| {
            let t = by_name[name.as_str()];
            if t.shape() != slot.shape() {
                err.get_or_insert(Error::ConfigMismatch(format!(
                    "{name}: stored shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            } else {
                *slot = t.clone();
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_raster(&self) -> Result<Backbone<f32>> {
        let mut m = Backbone::<f32>::init(self.model_config.clone())?;
        let mut names = Vec::new();
        m.weights.visit(&mut |n, _| names.push(n));
        self.fill(names, |f| m.weights.visit_mut(f))?;
        Ok(m)
    }

    pub fn to_dual(&self) -> Result<DualHeadModel<f32>> {
        let base = Backbone::<f32>::init(self.model_config.clone())?;
        // A raster checkpoint carries no branch; its names then cannot match
        // any dual-head layout.
        let depth = self.branch.map_or(self.model_config.num_layers, |b| b.depth);
        if let Some(b) = self.branch {
            if b.num_layers != self.model_config.num_layers {
                return Err(Error::ConfigMismatch(format!(
                    "branch over {} layers, model has {}",
                    b.num_layers, self.model_config.num_layers
                )));
            }
        }
        let mut m = DualHeadModel::build_from_pretrained(&base, depth)?;
        let names = m.param_names();
        self.fill(names, |f| m.weights.visit_mut(f))?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model_config).map_err(|e| Error::Corrupt(e.to_string()))?;
        put_blob(&mut out, &cfg);
        let branch = match &self.branch {
            Some(b) => serde_json::to_vec(b).map_err(|e| Error::Corrupt(e.to_string()))?,
            None => Vec::new(),
        };
        put_blob(&mut out, &branch);
        out.extend_from_slice(&self.step.to_le_bytes());
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_name(&mut out, name)?;
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                let c = opt.config;
                for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&opt.step_count().to_le_bytes());
                out.extend_from_slice(&(opt.moments().len() as u32).to_le_bytes());
                for (name, m) in opt.moments() {
                    put_name(&mut out, name)?;
                    out.extend_from_slice(&m.step.to_le_bytes());
                    out.extend_from_slice(&(m.m.len() as u32).to_le_bytes());
                    put_f32s(&mut out, &m.m);
                    put_f32s(&mut out, &m.v);
                }
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { rest: bytes };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cfg_len = r.u32()? as usize;
        let model_config: ModelConfig =
            serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Corrupt(format!("model config: {e}")))?;
        let branch_len = r.u32()? as usize;
        let branch = if branch_len == 0 {
            None
        } else {
            let b: BranchConfig =
                serde_json::from_slice(r.take(branch_len)?).map_err(|e| Error::Corrupt(format!("branch config: {e}")))?;
            Some(BranchConfig::new(b.depth, b.num_layers)?)
        };
        let step = r.u64()?;
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let mut seed = [0u8; 32];
                seed.copy_from_slice(r.take(32)?);
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(Error::Corrupt(format!("rng flag {f}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.name()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product::<usize>();
            let data = r.f32s(n)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamWConfig {
                    beta1: r.f32()?,
                    beta2: r.f32()?,
                    eps: r.f32()?,
                    weight_decay: r.f32()?,
                };
                let opt_step = r.u64()?;
                let entries = r.u32()? as usize;
                let mut moments = BTreeMap::new();
                for _ in 0..entries {
                    let name = r.name()?;
                    let st = r.u64()?;
                    let len = r.u32()? as usize;
                    let m = r.f32s(len)?;
                    let v = r.f32s(len)?;
                    moments.insert(name, Moments { step: st, m, v });
                }
                Some(AdamW::restore(config, opt_step, moments))
            }
            f => return Err(Error::Corrupt(format!("optimizer flag {f}"))),
        };
        if !r.rest.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.rest.len())));
        }
        Ok(Self {
            model_config,
            branch,
            tensors,
            optimizer,
            step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// FNV-1a hash of each tensor's bytes, keyed by name.
    pub fn parameter_hashes(&self) -> BTreeMap<String, u64> {
        self.tensors.iter().map(|(n, t)| (n.clone(), tensor_hash(t))).collect()
    }
}

pub fn tensor_hash(t: &Tensor<f32>) -> u64 {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    rng::fnv1a64(&bytes)
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::InvalidConfig(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(Error::Corrupt("unexpected end of file".into()));
        }
        let (a, b) = self.rest.split_at(n);
        self.rest = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        let mut out = Vec::with_capacity(n);
        let mut chunk = bytes;
        let mut b = [0u8; 4];
        while !chunk.is_empty() {
            chunk.read_exact(&mut b)?;
            out.push(f32::from_le_bytes(b));
        }
        Ok(out)
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))
    }
}

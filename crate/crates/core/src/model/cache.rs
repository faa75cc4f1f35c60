//! KV-cached incremental evaluation.
//!
//! Buffers are pre-allocated to `prefix + H*W` entries per sequence and
//! written at a shared fill pointer. Each cached entry remembers its flat
//! sequence position so the mask predicate is evaluated on positions, not on
//! cache slots.

use crate::error::{Error, Result};
use crate::grid::{MaskKind, MaskSpec};
use crate::nn::{gemm, kernels, MatMut, MatRef, Scalar, Tensor};

use super::backbone::Backbone;
use super::config::{BranchConfig, ModelConfig};
use super::dual::DualHeadModel;
use super::weights::{BackboneWeights, HeadWeights, LayerWeights};

#[derive(Clone, Debug)]
struct LayerCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
    len: usize,
}

impl<T: Scalar> LayerCache<T> {
    fn new(batch: usize, capacity: usize, d: usize) -> Self {
        Self {
            keys: vec![T::zero(); batch * capacity * d],
            values: vec![T::zero(); batch * capacity * d],
            len: 0,
        }
    }
}

/// Which model a cache set was laid out for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheLayout {
    /// All `L` layers in one stack.
    Backbone,
    /// Shared trunk plus separate horizontal and vertical top blocks.
    Dual { depth: usize },
}

/// Key/value buffers for one decode session.
#[derive(Clone, Debug)]
pub struct KvCacheSet<T> {
    layout: CacheLayout,
    mask: MaskSpec,
    batch: usize,
    capacity: usize,
    d: usize,
    positions: Vec<usize>,
    trunk: Vec<LayerCache<T>>,
    horizontal: Vec<LayerCache<T>>,
    vertical: Vec<LayerCache<T>>,
}

impl<T: Scalar> KvCacheSet<T> {
    fn alloc(cfg: &ModelConfig, layout: CacheLayout, mask: MaskSpec, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::CacheMisuse("batch of 0 sequences".into()));
        }
        if (mask.prefix_len, mask.height, mask.width) != (cfg.prefix_len, cfg.height, cfg.width) {
            return Err(Error::ConfigMismatch(format!("mask {mask:?} does not match model dims")));
        }
        let (cap, d) = (cfg.seq_len(), cfg.d_model);
        let (t, top) = match layout {
            CacheLayout::Backbone => (cfg.num_layers, 0),
            CacheLayout::Dual { depth } => (depth, cfg.num_layers - depth),
        };
        let make = |n: usize| (0..n).map(|_| LayerCache::new(batch, cap, d)).collect::<Vec<_>>();
        Ok(Self {
            layout,
            mask,
            batch,
            capacity: cap,
            d,
            positions: Vec::with_capacity(cap),
            trunk: make(t),
            horizontal: make(top),
            vertical: make(top),
        })
    }

    pub fn for_backbone(cfg: &ModelConfig, mask: MaskSpec, batch: usize) -> Result<Self> {
        Self::alloc(cfg, CacheLayout::Backbone, mask, batch)
    }

    pub fn for_dual(cfg: &ModelConfig, branch: &BranchConfig, mask: MaskSpec, batch: usize) -> Result<Self> {
        if mask.kind != MaskKind::DiagonalCausal {
            return Err(Error::MaskKindMismatch {
                expected: MaskKind::DiagonalCausal.name(),
                actual: mask.kind.name(),
            });
        }
        Self::alloc(cfg, CacheLayout::Dual { depth: branch.depth }, mask, batch)
    }

    pub fn layout(&self) -> CacheLayout {
        self.layout
    }

    pub fn mask(&self) -> &MaskSpec {
        &self.mask
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of cached positions per sequence.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Filled length of every trunk, horizontal and vertical buffer.
    pub fn lengths(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let l = |v: &[LayerCache<T>]| v.iter().map(|c| c.len).collect();
        (l(&self.trunk), l(&self.horizontal), l(&self.vertical))
    }

    fn check_lengths(&self) -> Result<()> {
        let (t, h, v) = self.lengths();
        let n = self.positions.len();
        if t.iter().chain(&h).chain(&v).any(|&l| l != n) {
            return Err(Error::CacheMisuse(format!(
                "buffer lengths diverged: trunk {t:?}, horizontal {h:?}, vertical {v:?}, positions {n}"
            )));
        }
        Ok(())
    }

    /// Checks that `positions` is a legal next step for this session.
    fn check_step(&self, positions: &[usize]) -> Result<()> {
        self.check_lengths()?;
        let m = &self.mask;
        let p = m.prefix_len;
        if self.positions.is_empty() {
            return if positions.iter().copied().eq(0..p) {
                Ok(())
            } else {
                Err(Error::CacheMisuse(format!("first step must be the prefix 0..{p}, got {positions:?}")))
            };
        }
        if positions.is_empty() || positions.iter().any(|&x| x < p || x >= m.seq_len()) {
            return Err(Error::CacheMisuse(format!("positions {positions:?} are not grid positions")));
        }
        if self.positions.len() + positions.len() > self.capacity {
            return Err(Error::CacheMisuse("cache capacity exceeded".into()));
        }
        match m.kind {
            MaskKind::RasterCausal => {
                let next = self.positions.len();
                if positions != [next] {
                    return Err(Error::CacheMisuse(format!(
                        "raster step must be the single position {next}, got {positions:?}"
                    )));
                }
            }
            MaskKind::DiagonalCausal => {
                let diag = |x: usize| m.coord(x).map(|c| c.diagonal()).unwrap_or(0);
                let t = diag(positions[0]);
                if positions.iter().any(|&x| diag(x) != t) {
                    return Err(Error::DiagonalSpan(positions.to_vec()));
                }
                let expected_t = self.positions.last().and_then(|&x| m.coord(x)).map_or(0, |c| c.diagonal() + 1);
                let expected: Vec<usize> = (0..m.height)
                    .filter(|&r| r <= expected_t && expected_t - r < m.width)
                    .map(|r| p + r * m.width + (expected_t - r))
                    .collect();
                if positions != expected.as_slice() {
                    return Err(Error::CacheMisuse(format!(
                        "diagonal step must be D_{expected_t} = {expected:?} in row order, got {positions:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Outputs of one incremental backbone step, rows ordered
/// `batch`-major then by step position.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Outputs of one incremental dual-head step.
#[derive(Clone, Debug, PartialEq)]
pub struct DualStepOutput<T> {
    pub hidden_h: Tensor<T>,
    pub hidden_v: Tensor<T>,
    pub logits_h: Tensor<T>,
    pub logits_v: Tensor<T>,
}

fn check_ids(cfg: &ModelConfig, ids: &[usize], batch: usize, n: usize) -> Result<()> {
    if ids.len() != batch * n {
        return Err(Error::ShapeMismatch {
            op: "forward_incremental",
            detail: format!("{} ids for {batch} sequences of {n} new positions", ids.len()),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.embed_rows()) {
        return Err(Error::IndexOutOfRange(format!("token id {bad}")));
    }
    Ok(())
}

fn embed_step<T: Scalar>(cfg: &ModelConfig, w: &BackboneWeights<Tensor<T>>, ids: &[usize], positions: &[usize]) -> Vec<T> {
    let d = cfg.d_model;
    let e = &w.embed;
    let mut x = Vec::with_capacity(ids.len() * d);
    let n = positions.len();
    for (r, &id) in ids.iter().enumerate() {
        let pos = positions[r % n];
        let tok = e.tokens.row(id);
        let (a, b) = if pos < cfg.prefix_len {
            (e.prefix_pos.row(pos), None)
        } else {
            let i = pos - cfg.prefix_len;
            (e.rows.row(i / cfg.width), Some(e.cols.row(i % cfg.width)))
        };
        for j in 0..d {
            let v = tok[j] + a[j];
            x.push(match b {
                Some(b) => v + b[j],
                None => v + T::zero(),
            });
        }
    }
    x
}

struct StepCtx<'a> {
    batch: usize,
    n: usize,
    heads: usize,
    d: usize,
    capacity: usize,
    /// Positions of all cached entries after this step's write.
    positions: &'a [usize],
    mask: &'a MaskSpec,
}

fn rms_rows<T: Scalar>(x: &[T], gain: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    kernels::rms_norm(x, gain.data(), &mut out);
    out
}

fn layer_step<T: Scalar>(w: &LayerWeights<Tensor<T>>, cache: &mut LayerCache<T>, x: &mut [T], ctx: &StepCtx) {
    let (batch, n, d, cap) = (ctx.batch, ctx.n, ctx.d, ctx.capacity);
    let rows = batch * n;
    let hd = d / ctx.heads;
    let h = rms_rows(x, &w.attn_norm);
    let q = kernels::matmul(&h, rows, d, w.wq.data(), d);
    let k = kernels::matmul(&h, rows, d, w.wk.data(), d);
    let v = kernels::matmul(&h, rows, d, w.wv.data(), d);
    let old = cache.len;
    for b in 0..batch {
        let dst = (b * cap + old) * d..(b * cap + old + n) * d;
        let src = b * n * d..(b + 1) * n * d;
        cache.keys[dst.clone()].copy_from_slice(&k[src.clone()]);
        cache.values[dst].copy_from_slice(&v[src]);
    }
    cache.len = old + n;
    let len = cache.len;
    let qpos = &ctx.positions[old..len];
    let allowed: Vec<bool> = qpos
        .iter()
        .flat_map(|&qp| ctx.positions.iter().map(move |&kp| ctx.mask.allows_unchecked(qp, kp)))
        .collect();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut scores = vec![T::zero(); n * len];
    let mut attn = vec![T::zero(); rows * d];
    for b in 0..batch {
        for head in 0..ctx.heads {
            let qoff = b * n * d + head * hd;
            let koff = b * cap * d + head * hd;
            let qm = MatRef { data: &q[qoff..], rows: n, cols: hd, rs: d, cs: 1 };
            let km = MatRef { data: &cache.keys[koff..], rows: len, cols: hd, rs: d, cs: 1 };
            let vm = MatRef { data: &cache.values[koff..], rows: len, cols: hd, rs: d, cs: 1 };
            gemm(scale, qm, km.t(), T::zero(), MatMut::row_major(&mut scores, n, len));
            for (row, m) in scores.chunks_exact_mut(len).zip(allowed.chunks_exact(len)) {
                let mut max = T::neg_infinity();
                for (&s, &ok) in row.iter().zip(m) {
                    if ok && s > max {
                        max = s;
                    }
                }
                let mut sum = T::zero();
                for (s, &ok) in row.iter_mut().zip(m) {
                    *s = if ok { (*s - max).exp() } else { T::zero() };
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s = *s / sum;
                }
            }
            gemm(
                T::one(),
                MatRef::row_major(&scores, n, len),
                vm,
                T::zero(),
                MatMut { data: &mut attn[qoff..], rows: n, cols: hd, rs: d, cs: 1 },
            );
        }
    }
    let o = kernels::matmul(&attn, rows, d, w.wo.data(), d);
    kernels::add_assign(x, &o);
    let h = rms_rows(x, &w.ffn_norm);
    let f = w.w1.shape()[1];
    let mut hidden = kernels::matmul(&h, rows, d, w.w1.data(), f);
    for v in hidden.iter_mut() {
        *v = kernels::silu(*v);
    }
    let o = kernels::matmul(&hidden, rows, f, w.w2.data(), d);
    kernels::add_assign(x, &o);
}

fn stack_step<T: Scalar>(layers: &[LayerWeights<Tensor<T>>], caches: &mut [LayerCache<T>], x: &mut [T], ctx: &StepCtx) {
    for (w, c) in layers.iter().zip(caches.iter_mut()) {
        layer_step(w, c, x, ctx);
    }
}

fn head_step<T: Scalar>(w: &HeadWeights<Tensor<T>>, x: &[T], rows: usize, d: usize) -> Vec<T> {
    let h = rms_rows(x, &w.norm);
    kernels::matmul(&h, rows, d, w.proj.data(), w.proj.shape()[1])
}

fn finite<T: Scalar>(t: Vec<T>, shape: [usize; 2], what: &'static str) -> Result<Tensor<T>> {
    if !kernels::all_finite(&t) {
        return Err(Error::NonFinite(what));
    }
    Tensor::new(shape.to_vec(), t)
}

fn begin_step<T: Scalar>(
    cfg: &ModelConfig,
    cache: &mut KvCacheSet<T>,
    ids: &[usize],
    positions: &[usize],
    layout: CacheLayout,
) -> Result<()> {
    if cache.layout != layout {
        return Err(Error::CacheMisuse(format!("cache laid out for {:?}, model needs {layout:?}", cache.layout)));
    }
    if cache.d != cfg.d_model || cache.capacity != cfg.seq_len() {
        return Err(Error::CacheMisuse("cache dimensions do not match the model".into()));
    }
    check_ids(cfg, ids, cache.batch, positions.len())?;
    cache.check_step(positions)?;
    cache.positions.extend_from_slice(positions);
    Ok(())
}

impl<T: Scalar> Backbone<T> {
    /// Evaluates `positions` (one decode step) for every sequence in the
    /// cache's batch. `ids` holds `batch * positions.len()` tokens,
    /// sequence-major.
    pub fn forward_incremental(&self, ids: &[usize], positions: &[usize], cache: &mut KvCacheSet<T>) -> Result<StepOutput<T>> {
        let cfg = &self.config;
        begin_step(cfg, cache, ids, positions, CacheLayout::Backbone)?;
        let (d, rows) = (cfg.d_model, ids.len());
        let mut x = embed_step(cfg, &self.weights, ids, positions);
        let ctx = StepCtx {
            batch: cache.batch,
            n: positions.len(),
            heads: cfg.num_heads,
            d,
            capacity: cache.capacity,
            positions: &cache.positions,
            mask: &cache.mask,
        };
        stack_step(&self.weights.layers, &mut cache.trunk, &mut x, &ctx);
        let logits = head_step(&self.weights.head, &x, rows, d);
        Ok(StepOutput {
            hidden: finite(x, [rows, d], "incremental hidden")?,
            logits: finite(logits, [rows, cfg.vocab_size], "incremental logits")?,
        })
    }
}

impl<T: Scalar> DualHeadModel<T> {
    /// One batched step through the trunk and both branches; every buffer
    /// grows by `positions.len()`.
    pub fn forward_incremental(
        &self,
        ids: &[usize],
        positions: &[usize],
        cache: &mut KvCacheSet<T>,
    ) -> Result<DualStepOutput<T>> {
        let cfg = &self.config;
        let depth = self.branch.depth;
        begin_step(cfg, cache, ids, positions, CacheLayout::Dual { depth })?;
        let (d, rows) = (cfg.d_model, ids.len());
        let w = &self.weights;
        let mut x = embed_step(cfg, &w.base, ids, positions);
        let ctx = StepCtx {
            batch: cache.batch,
            n: positions.len(),
            heads: cfg.num_heads,
            d,
            capacity: cache.capacity,
            positions: &cache.positions,
            mask: &cache.mask,
        };
        stack_step(&w.base.layers[..depth], &mut cache.trunk, &mut x, &ctx);
        let mut xv = x.clone();
        stack_step(&w.base.layers[depth..], &mut cache.horizontal, &mut x, &ctx);
        stack_step(&w.vertical, &mut cache.vertical, &mut xv, &ctx);
        let lh = head_step(&w.base.head, &x, rows, d);
        let lv = head_step(&w.head_v, &xv, rows, d);
        let v = cfg.vocab_size;
        Ok(DualStepOutput {
            hidden_h: finite(x, [rows, d], "incremental hidden")?,
            hidden_v: finite(xv, [rows, d], "incremental hidden")?,
            logits_h: finite(lh, [rows, v], "incremental logits")?,
            logits_v: finite(lv, [rows, v], "incremental logits")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{diagonal_partition, Coord, TokenGrid};
    use crate::model::{Condition, GateMode};

    fn cfg(h: usize, w: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            d_model: 16,
            num_heads: 2,
            head_dim: 8,
            ffn_dim: 20,
            vocab_size: 6,
            num_classes: 2,
            height: h,
            width: w,
            prefix_len: 1,
            seed: 4,
        }
    }

    fn ids(cfg: &ModelConfig) -> Vec<usize> {
        let toks = (0..cfg.grid_len()).map(|i| ((i * 7 + 3) % cfg.vocab_size) as u32).collect();
        let g = TokenGrid::new(cfg.height, cfg.width, cfg.vocab_size, toks).unwrap();
        cfg.sequence(&g, Condition::Class(1)).unwrap()
    }

    fn close(a: &[f32], b: &[f32]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-4)
    }

    #[test]
    fn prefix_only_matches_full() {
        let c = cfg(2, 2);
        let m = Backbone::<f32>::init(c.clone()).unwrap();
        let mask = c.mask(MaskKind::RasterCausal);
        let seq = ids(&c);
        let full = m.forward_full(&seq, 1, &mask).unwrap();
        let mut cache = KvCacheSet::for_backbone(&c, mask, 1).unwrap();
        let out = m.forward_incremental(&seq[..1], &[0], &mut cache).unwrap();
        assert!(close(out.logits.row(0), full.logits.row(0)));
    }

    #[test]
    fn raster_steps_match_full() {
        for kind in [MaskKind::RasterCausal, MaskKind::DiagonalCausal] {
            let c = cfg(3, 3);
            let m = Backbone::<f32>::init(c.clone()).unwrap();
            let mask = c.mask(kind);
            let seq = ids(&c);
            let full = m.forward_full(&seq, 1, &mask).unwrap();
            let mut cache = KvCacheSet::for_backbone(&c, mask, 1).unwrap();
            m.forward_incremental(&seq[..1], &[0], &mut cache).unwrap();
            let steps: Vec<Vec<usize>> = match kind {
                MaskKind::RasterCausal => (1..c.seq_len()).map(|p| vec![p]).collect(),
                MaskKind::DiagonalCausal => diagonal_partition(3, 3)
                    .unwrap()
                    .diagonals()
                    .iter()
                    .map(|d| d.iter().map(|&at| mask.position(at)).collect())
                    .collect(),
            };
            for pos in steps {
                let step_ids: Vec<usize> = pos.iter().map(|&p| seq[p]).collect();
                let out = m.forward_incremental(&step_ids, &pos, &mut cache).unwrap();
                for (i, &p) in pos.iter().enumerate() {
                    assert!(close(out.logits.row(i), full.logits.row(p)), "{kind:?} position {p}");
                }
            }
        }
    }

    #[test]
    fn diagonal_append_grows_by_width() {
        let c = cfg(3, 3);
        let base = Backbone::<f32>::init(c.clone()).unwrap();
        let dual = DualHeadModel::build_from_pretrained(&base, 2).unwrap();
        let mask = c.mask(MaskKind::DiagonalCausal);
        let mut cache = KvCacheSet::for_dual(&c, &dual.branch, mask, 1).unwrap();
        dual.forward_incremental(&[c.vocab_size], &[0], &mut cache).unwrap();
        dual.forward_incremental(&[1], &[1], &mut cache).unwrap();
        let before = cache.len();
        let d1 = [mask.position(Coord::new(0, 1)), mask.position(Coord::new(1, 0))];
        dual.forward_incremental(&[2, 3], &d1, &mut cache).unwrap();
        assert_eq!(cache.len(), before + 2);
        let (t, h, v) = cache.lengths();
        assert!(t.iter().chain(&h).chain(&v).all(|&l| l == 4));
    }

    #[test]
    fn diagonal_span_rejected() {
        let c = cfg(3, 3);
        let base = Backbone::<f32>::init(c.clone()).unwrap();
        let dual = DualHeadModel::build_from_pretrained(&base, 2).unwrap();
        let mask = c.mask(MaskKind::DiagonalCausal);
        let mut cache = KvCacheSet::for_dual(&c, &dual.branch, mask, 1).unwrap();
        dual.forward_incremental(&[c.vocab_size], &[0], &mut cache).unwrap();
        let err = dual.forward_incremental(&[0, 0], &[1, 2], &mut cache).unwrap_err();
        assert!(matches!(err, Error::DiagonalSpan(_)));
        // A rejected step leaves the cache untouched.
        assert_eq!(cache.len(), 1);
        assert!(dual.forward_incremental(&[0], &[2], &mut cache).is_err());
        assert!(dual.forward_incremental(&[0], &[1], &mut cache).is_ok());
    }

    #[test]
    fn raster_rejects_wide_steps() {
        let c = cfg(2, 2);
        let m = Backbone::<f32>::init(c.clone()).unwrap();
        let mut cache = KvCacheSet::for_backbone(&c, c.mask(MaskKind::RasterCausal), 1).unwrap();
        assert!(m.forward_incremental(&[0], &[1], &mut cache).is_err());
        m.forward_incremental(&[c.vocab_size], &[0], &mut cache).unwrap();
        assert!(m.forward_incremental(&[0, 1], &[1, 2], &mut cache).is_err());
        assert!(m.forward_incremental(&[0], &[2], &mut cache).is_err());
        assert!(m.forward_incremental(&[0], &[1], &mut cache).is_ok());
    }

    #[test]
    fn dual_steps_match_full() {
        let c = cfg(3, 4);
        let base = Backbone::<f32>::init(c.clone()).unwrap();
        let mut dual = DualHeadModel::build_from_pretrained(&base, 1).unwrap();
        for v in dual.weights.head_v.proj.data_mut() {
            *v *= 1.5;
        }
        let mask = c.mask(MaskKind::DiagonalCausal);
        let seq = ids(&c);
        let full = dual.forward_full(&seq, 1, &mask, GateMode::Learned).unwrap();
        let mut cache = KvCacheSet::for_dual(&c, &dual.branch, mask, 1).unwrap();
        dual.forward_incremental(&seq[..1], &[0], &mut cache).unwrap();
        for diag in diagonal_partition(3, 4).unwrap().diagonals() {
            let pos: Vec<usize> = diag.iter().map(|&at| mask.position(at)).collect();
            let step_ids: Vec<usize> = pos.iter().map(|&p| seq[p]).collect();
            let out = dual.forward_incremental(&step_ids, &pos, &mut cache).unwrap();
            for (i, &p) in pos.iter().enumerate() {
                assert!(close(out.logits_h.row(i), full.logits_h.row(p)));
                assert!(close(out.logits_v.row(i), full.logits_v.row(p)));
            }
        }
        assert_eq!(cache.len(), c.seq_len());
    }

    #[test]
    fn layout_mismatch() {
        let c = cfg(2, 2);
        let m = Backbone::<f32>::init(c.clone()).unwrap();
        let branch = BranchConfig::new(1, 3).unwrap();
        let mut cache = KvCacheSet::for_dual(&c, &branch, c.mask(MaskKind::DiagonalCausal), 1).unwrap();
        assert!(m.forward_incremental(&[c.vocab_size], &[0], &mut cache).is_err());
        assert!(KvCacheSet::<f32>::for_dual(&c, &branch, c.mask(MaskKind::RasterCausal), 1).is_err());
    }
}

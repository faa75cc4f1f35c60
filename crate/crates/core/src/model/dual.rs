//! Dual-head diagonal-parallel model built from a pre-trained raster
//! backbone.
//!
//! The first `m` layers form a shared trunk. The original top layers and
//! output head become the horizontal branch (predicting the right
//! neighbour); a trainable clone of the same layers plus a second head forms
//! the vertical branch (predicting the lower neighbour). A gate computed
//! from the two predecessor states mixes the directional logits per target.

use crate::error::{Error, Result};
use crate::grid::{Coord, MaskKind, MaskSpec};
use crate::nn::{kernels, Graph, Scalar, Tensor, Var};
use crate::rng;

use super::backbone::{attention_spec, check_sequences, embed_graph, head_graph, layers_graph, normal_tensor, Backbone};
use super::config::{BranchConfig, ModelConfig};
use super::weights::{is_new_component, DualWeights, GateWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct DualHeadModel<T: Scalar> {
    pub config: ModelConfig,
    pub branch: BranchConfig,
    pub weights: DualWeights<Tensor<T>>,
}

/// How the per-target gate is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// `sigmoid(MLP([h_H(p, q-1); h_V(p-1, q)]))`.
    Learned,
    /// A constant gate on interior targets (0.5 is plain averaging).
    Fixed(f64),
}

/// Row bookkeeping for a batch of teacher-forced sequences: which logits
/// rows feed each target and which rows supervise the auxiliary losses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetLayout {
    /// Per target (raster order, batch-major): row of the horizontal logits.
    pub h_src: Vec<usize>,
    /// Per target: row of the vertical logits.
    pub v_src: Vec<usize>,
    /// Per target: index into `[interior gates..., 1, 0]`.
    pub gate_src: Vec<usize>,
    /// Interior targets: row of `h_H(p, q-1)` and of `h_V(p-1, q)`.
    pub gate_h: Vec<usize>,
    pub gate_v: Vec<usize>,
    /// Rows `(p, q)` with `q < W-1`, supervising `y(p, q+1)`.
    pub aux_h_rows: Vec<usize>,
    pub aux_h_targets: Vec<usize>,
    /// Rows `(p, q)` with `p < H-1`, supervising `y(p+1, q)`.
    pub aux_v_rows: Vec<usize>,
    pub aux_v_targets: Vec<usize>,
    /// Every grid token, batch-major raster order.
    pub targets: Vec<usize>,
}

impl TargetLayout {
    pub fn new(cfg: &ModelConfig, ids: &[usize], batch: usize) -> Self {
        let (p0, h, w, s) = (cfg.prefix_len, cfg.height, cfg.width, cfg.seq_len());
        let n_int = (h - 1) * (w - 1);
        let (one, zero) = (batch * n_int, batch * n_int + 1);
        let mut l = TargetLayout {
            h_src: Vec::new(),
            v_src: Vec::new(),
            gate_src: Vec::new(),
            gate_h: Vec::new(),
            gate_v: Vec::new(),
            aux_h_rows: Vec::new(),
            aux_h_targets: Vec::new(),
            aux_v_rows: Vec::new(),
            aux_v_targets: Vec::new(),
            targets: Vec::new(),
        };
        for b in 0..batch {
            let base = b * s;
            let row = |p: usize, q: usize| base + p0 + p * w + q;
            for p in 0..h {
                for q in 0..w {
                    l.targets.push(ids[row(p, q)]);
                    let prefix_last = base + p0 - 1;
                    match (p, q) {
                        (0, 0) => {
                            l.h_src.push(prefix_last);
                            l.v_src.push(prefix_last);
                            l.gate_src.push(one);
                        }
                        (0, q) => {
                            l.h_src.push(row(0, q - 1));
                            l.v_src.push(prefix_last);
                            l.gate_src.push(one);
                        }
                        (p, 0) => {
                            l.h_src.push(prefix_last);
                            l.v_src.push(row(p - 1, 0));
                            l.gate_src.push(zero);
                        }
                        (p, q) => {
                            l.h_src.push(row(p, q - 1));
                            l.v_src.push(row(p - 1, q));
                            l.gate_src.push(l.gate_h.len());
                            l.gate_h.push(row(p, q - 1));
                            l.gate_v.push(row(p - 1, q));
                        }
                    }
                    if q + 1 < w {
                        l.aux_h_rows.push(row(p, q));
                        l.aux_h_targets.push(ids[row(p, q + 1)]);
                    }
                    if p + 1 < h {
                        l.aux_v_rows.push(row(p, q));
                        l.aux_v_targets.push(ids[row(p + 1, q)]);
                    }
                }
            }
        }
        l
    }
}

/// Tape handles for one dual-head forward.
#[derive(Clone, Debug)]
pub struct DualGraph {
    pub trunk: Var,
    pub hidden_h: Var,
    pub hidden_v: Var,
    /// `[batch * seq_len, V]` horizontal and vertical logits for every position.
    pub logits_h: Var,
    pub logits_v: Var,
    /// `[batch * H * W, 1]` gate per target (1 on the first row, 0 on the
    /// first column below it).
    pub gate: Var,
    /// `[batch * H * W, V]` fused logits per target, raster order.
    pub fused: Var,
    pub layout: TargetLayout,
}

/// Tensors of a gradient-free dual-head forward.
#[derive(Clone, Debug)]
pub struct DualForward<T> {
    pub hidden_h: Tensor<T>,
    pub hidden_v: Tensor<T>,
    pub logits_h: Tensor<T>,
    pub logits_v: Tensor<T>,
    pub gate: Tensor<T>,
    pub fused: Tensor<T>,
}

/// Parameter partition for one adaptation stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableSets {
    pub frozen: Vec<String>,
    /// Trainable parameters with their learning-rate multiplier.
    pub trainable: Vec<(String, f32)>,
}

impl TrainableSets {
    pub fn multiplier(&self, name: &str) -> Option<f32> {
        self.trainable.iter().find(|(n, _)| n == name).map(|&(_, m)| m)
    }
}

fn init_gate<T: Scalar>(cfg: &ModelConfig) -> GateWeights<Tensor<T>> {
    let d = cfg.d_model;
    let mut r = rng::stream(cfg.seed, "gate");
    GateWeights {
        w1: normal_tensor(&mut r, &[2 * d, d], 1.0 / ((2 * d) as f64).sqrt()),
        b1: Tensor::zeros(&[d]),
        w2: Tensor::zeros(&[d, 1]),
        b2: Tensor::zeros(&[1]),
    }
}

impl<T: Scalar> DualHeadModel<T> {
    /// Splits `base` at depth `m`: the vertical block and head are clones of
    /// the horizontal ones and the gate's output layer starts at zero, so a
    /// fresh model has `z_V == z_H` and `g == 0.5` everywhere.
    pub fn build_from_pretrained(base: &Backbone<T>, depth: usize) -> Result<Self> {
        base.config.validate()?;
        let branch = BranchConfig::new(depth, base.config.num_layers)?;
        let w = &base.weights;
        if w.layers.len() != base.config.num_layers {
            return Err(Error::ConfigMismatch(format!(
                "{} layers in weights, config says {}",
                w.layers.len(),
                base.config.num_layers
            )));
        }
        Ok(Self {
            config: base.config.clone(),
            branch,
            weights: DualWeights {
                base: w.clone(),
                vertical: w.layers[depth..].to_vec(),
                head_v: w.head.clone(),
                gate: init_gate(&base.config),
            },
        })
    }

    /// The horizontal path as a stand-alone raster backbone.
    pub fn horizontal_backbone(&self) -> Backbone<T> {
        Backbone {
            config: self.config.clone(),
            weights: self.weights.base.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DualHeadModel<U> {
        DualHeadModel {
            config: self.config.clone(),
            branch: self.branch,
            weights: self.weights.try_map(&mut |_, t| Ok(t.cast())).expect("cast is infallible"),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: &dyn Fn(&str) -> bool) -> Result<DualWeights<Var>> {
        self.weights.try_map(&mut |name, t| Ok(g.leaf(t.clone(), trainable(name))))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.weights.visit(&mut |n, _| names.push(n));
        names
    }

    /// Stage 1: only the vertical block, `Head^V` and the gate train.
    /// Stage 2: everything trains, inherited parameters at
    /// `backbone_multiplier`.
    pub fn trainable_sets(&self, stage: u8, backbone_multiplier: f32) -> Result<TrainableSets> {
        let mut sets = TrainableSets {
            frozen: Vec::new(),
            trainable: Vec::new(),
        };
        for name in self.param_names() {
            match (stage, is_new_component(&name)) {
                (1, true) | (2, true) => sets.trainable.push((name, 1.0)),
                (1, false) => sets.frozen.push(name),
                (2, false) => sets.trainable.push((name, backbone_multiplier)),
                _ => return Err(Error::InvalidStage(stage)),
            }
        }
        if stage != 1 && stage != 2 {
            return Err(Error::InvalidStage(stage));
        }
        Ok(sets)
    }

    /// Teacher-forced forward without gradients.
    pub fn forward_full(&self, ids: &[usize], batch: usize, mask: &MaskSpec, gate: GateMode) -> Result<DualForward<T>> {
        let mut g = Graph::new();
        let w = self.bind(&mut g, &|_| false)?;
        let out = dual_graph(&mut g, &self.config, &self.branch, &w, ids, batch, mask, gate)?;
        Ok(DualForward {
            hidden_h: g.value(out.hidden_h).clone(),
            hidden_v: g.value(out.hidden_v).clone(),
            logits_h: g.value(out.logits_h).clone(),
            logits_v: g.value(out.logits_v).clone(),
            gate: g.value(out.gate).clone(),
            fused: g.value(out.fused).clone(),
        })
    }

    /// Gate value for one interior target from the horizontal predecessor's
    /// final horizontal state and the vertical predecessor's final vertical
    /// state.
    pub fn compute_gate(&self, h_horizontal: &[T], h_vertical: &[T]) -> Result<T> {
        let d = self.config.d_model;
        if h_horizontal.len() != d || h_vertical.len() != d {
            return Err(Error::ShapeMismatch {
                op: "compute_gate",
                detail: format!("states of width {} and {}, model width {d}", h_horizontal.len(), h_vertical.len()),
            });
        }
        let mut input = h_horizontal.to_vec();
        input.extend_from_slice(h_vertical);
        Ok(gate_rows(&self.weights.gate, &input, 1)[0])
    }
}

/// `g * z_h + (1 - g) * z_v`, element-wise.
pub fn fuse_logits<T: Scalar>(g: T, z_h: &[T], z_v: &[T]) -> Result<Vec<T>> {
    if z_h.len() != z_v.len() {
        return Err(Error::ShapeMismatch {
            op: "fuse_logits",
            detail: format!("{} vs {} logits", z_h.len(), z_v.len()),
        });
    }
    let rest = T::one() - g;
    Ok(z_h.iter().zip(z_v).map(|(&a, &b)| g * a + rest * b).collect())
}

/// Gate values for `n` concatenated `[h_H; h_V]` rows.
pub(crate) fn gate_rows<T: Scalar>(w: &GateWeights<Tensor<T>>, input: &[T], n: usize) -> Vec<T> {
    if n == 0 {
        return Vec::new();
    }
    let d2 = w.w1.shape()[0];
    let d = w.w1.shape()[1];
    let mut hidden = kernels::matmul(input, n, d2, w.w1.data(), d);
    for row in hidden.chunks_exact_mut(d) {
        kernels::add_assign(row, w.b1.data());
        for v in row.iter_mut() {
            *v = kernels::silu(*v);
        }
    }
    let mut out = kernels::matmul(&hidden, n, d, w.w2.data(), 1);
    for v in out.iter_mut() {
        *v = kernels::sigmoid(*v + w.b2.data()[0]);
    }
    out
}

fn gate_graph<T: Scalar>(g: &mut Graph<T>, w: &GateWeights<Var>, hh: Var, hv: Var) -> Result<Var> {
    let x = g.concat(&[hh, hv])?;
    let x = g.matmul(x, w.w1)?;
    let x = g.add_row(x, w.b1)?;
    let x = g.silu(x)?;
    let x = g.matmul(x, w.w2)?;
    let x = g.add_row(x, w.b2)?;
    g.sigmoid(x)
}

/// Full dual-head forward on the tape under the diagonal mask.
#[allow(clippy::too_many_arguments)]
pub fn dual_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    branch: &BranchConfig,
    w: &DualWeights<Var>,
    ids: &[usize],
    batch: usize,
    mask: &MaskSpec,
    gate_mode: GateMode,
) -> Result<DualGraph> {
    if mask.kind != MaskKind::DiagonalCausal {
        return Err(Error::MaskKindMismatch {
            expected: MaskKind::DiagonalCausal.name(),
            actual: mask.kind.name(),
        });
    }
    check_sequences(cfg, ids, batch, mask)?;
    let spec = attention_spec(cfg, mask);
    let m = branch.depth;
    let mut scratch = Vec::new();
    let x = embed_graph(g, cfg, &w.base.embed, ids, batch)?;
    let trunk = layers_graph(g, &w.base.layers[..m], x, &spec, &mut scratch)?;
    let hidden_h = layers_graph(g, &w.base.layers[m..], trunk, &spec, &mut scratch)?;
    let hidden_v = layers_graph(g, &w.vertical, trunk, &spec, &mut scratch)?;
    let logits_h = head_graph(g, &w.base.head, hidden_h)?;
    let logits_v = head_graph(g, &w.head_v, hidden_v)?;

    let layout = TargetLayout::new(cfg, ids, batch);
    let one = g.constant(Tensor::full(&[1, 1], T::one()));
    let zero = g.constant(Tensor::zeros(&[1, 1]));
    let mut stack = Vec::with_capacity(3);
    if !layout.gate_h.is_empty() {
        let interior = match gate_mode {
            GateMode::Learned => {
                let hh = g.gather_rows(hidden_h, &layout.gate_h)?;
                let hv = g.gather_rows(hidden_v, &layout.gate_v)?;
                gate_graph(g, &w.gate, hh, hv)?
            }
            GateMode::Fixed(v) => g.constant(Tensor::full(&[layout.gate_h.len(), 1], T::of(v))),
        };
        stack.push(interior);
    }
    stack.push(one);
    stack.push(zero);
    let gates = g.concat_rows(&stack)?;
    let gate = g.gather_rows(gates, &layout.gate_src)?;
    let a = g.gather_rows(logits_h, &layout.h_src)?;
    let b = g.gather_rows(logits_v, &layout.v_src)?;
    let fused = g.gate_mix(gate, a, b)?;
    Ok(DualGraph {
        trunk,
        hidden_h,
        hidden_v,
        logits_h,
        logits_v,
        gate,
        fused,
        layout,
    })
}

/// Row of the fused-logit matrix for target `at` of sequence `b`.
pub fn target_row(cfg: &ModelConfig, b: usize, at: Coord) -> usize {
    b * cfg.grid_len() + at.row * cfg.width + at.col
}

//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use flashar_core::decode::{argmax, decode_diagonal, decode_raster, CfgConfig, Decoded, SamplerConfig};
use flashar_core::grid::{MaskKind, MaskSpec, TokenGrid};
use flashar_core::model::{
    dual_graph, Backbone, Condition, DualHeadModel, GateMode, ModelConfig,
};
use flashar_core::nn::{AttentionSpec, Graph, Scalar, Tensor, Var};
use flashar_core::train::{compute_losses, LossWeights};
use flashar_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(height: usize, width: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 3,
        d_model: 8,
        num_heads: 2,
        head_dim: 4,
        ffn_dim: 12,
        vocab_size: 5,
        num_classes: 3,
        height,
        width,
        prefix_len: 2,
        seed,
    }
}

pub fn random_tensor<T: Scalar>(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(r.random_range(-scale..scale)))
}

pub fn random_grid(r: &mut ChaCha8Rng, h: usize, w: usize, vocab: usize) -> TokenGrid {
    let tokens = (0..h * w).map(|_| r.random_range(0..vocab) as u32).collect();
    TokenGrid::new(h, w, vocab, tokens).unwrap()
}

/// Replaces every parameter with values large enough that attention,
/// normalization and the gate all operate away from their trivial regimes.
pub fn randomize<T: Scalar>(model: &mut DualHeadModel<T>, seed: u64) {
    let mut r = rng(seed);
    model.weights.visit_mut(&mut |name, t| {
        let shape = t.shape().to_vec();
        *t = if name.ends_with("norm") {
            Tensor::from_fn(&shape, |_| T::of(1.0 + r.random_range(-0.3..0.3)))
        } else {
            random_tensor(&mut r, &shape, 0.6)
        };
    });
}

pub fn random_dual<T: Scalar>(cfg: &ModelConfig, depth: usize, seed: u64) -> DualHeadModel<T> {
    let base = Backbone::<T>::init(cfg.clone()).unwrap();
    let mut m = DualHeadModel::build_from_pretrained(&base, depth).unwrap();
    randomize(&mut m, seed);
    m
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

type Build<'a, T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var> + 'a;

fn eval<T: Scalar>(leaves: &[Tensor<T>], f: &Build<'_, T>) -> T {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).data()[0]
}

/// Agreement between tape gradients and central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Worst relative error of any single leaf's gradient.
    pub worst_leaf: f64,
    /// Relative error of all leaf gradients taken as one vector.
    pub global: f64,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`.
pub fn grad_check<T: Scalar>(leaves: &[Tensor<T>], h: f64, f: &Build<'_, T>) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut worst_leaf = 0.0f64;
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g.grad_or_zero(*v).iter().map(|&x| <T as Scalar>::to_f64(x)).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut work = leaves.to_vec();
        for j in 0..leaves[i].numel() {
            let x0 = leaves[i].data()[j];
            work[i].data_mut()[j] = x0 + T::of(h);
            let up = eval(&work, f);
            work[i].data_mut()[j] = x0 - T::of(h);
            let down = eval(&work, f);
            work[i].data_mut()[j] = x0;
            numeric.push(<T as Scalar>::to_f64(up - down) / (2.0 * h));
        }
        worst_leaf = worst_leaf.max(rel_err(&analytic, &numeric));
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    GradCheck {
        worst_leaf,
        global: rel_err(&all_a, &all_n),
    }
}

/// Projects a tensor-valued node onto a fixed random direction so every
/// output element contributes to the checked scalar.
fn project<T: Scalar>(g: &mut Graph<T>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let dir = g.constant(random_tensor(&mut rng(seed), &shape, 1.0));
    let y = g.mul(x, dir)?;
    g.sum(y)
}

fn causal_spec(kind: MaskKind, prefix: usize, h: usize, w: usize, heads: usize) -> AttentionSpec {
    let mask = MaskSpec::new(kind, prefix, h, w).unwrap();
    AttentionSpec {
        heads,
        seq_len: mask.seq_len(),
        mask: Arc::from(mask.full()),
    }
}

/// One gradcheck per differentiable primitive, in 64-bit arithmetic.
pub fn primitive_gradchecks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let h = 1e-5;
    let mut t = |shape: &[usize]| random_tensor::<f64>(&mut r, shape, 1.0);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    macro_rules! check {
        ($name:expr, [$($leaf:expr),+], |$g:ident, $v:ident| $body:expr) => {{
            let leaves = vec![$($leaf),+];
            let f = |$g: &mut Graph<f64>, $v: &[Var]| -> Result<Var> {
                let y = $body?;
                project($g, y, seed ^ 0xabc)
            };
            out.push(($name, grad_check(&leaves, h, &f).worst_leaf));
        }};
    }
    check!("matmul", [t(&[3, 4]), t(&[4, 5])], |g, v| g.matmul(v[0], v[1]));
    check!("add", [t(&[3, 4]), t(&[3, 4])], |g, v| g.add(v[0], v[1]));
    check!("add_row", [t(&[3, 4]), t(&[4])], |g, v| g.add_row(v[0], v[1]));
    check!("mul", [t(&[3, 4]), t(&[3, 4])], |g, v| g.mul(v[0], v[1]));
    check!("scale", [t(&[3, 4])], |g, v| g.scale(v[0], -1.7));
    check!("embedding", [t(&[5, 3])], |g, v| g.embedding(v[0], &[4, 0, 4, 2]));
    check!("rms_norm", [t(&[3, 6]), t(&[6])], |g, v| g.rms_norm(v[0], v[1]));
    check!("sigmoid", [t(&[3, 4])], |g, v| g.sigmoid(v[0]));
    check!("silu", [t(&[3, 4])], |g, v| g.silu(v[0]));
    check!("softmax", [t(&[3, 5])], |g, v| g.softmax(v[0]));
    check!("concat", [t(&[3, 2]), t(&[3, 4])], |g, v| g.concat(&[v[0], v[1]]));
    check!("concat_rows", [t(&[2, 3]), t(&[4, 3])], |g, v| g.concat_rows(&[v[0], v[1]]));
    check!("slice", [t(&[3, 6])], |g, v| g.slice(v[0], 1, 3));
    check!("gather_rows", [t(&[4, 3])], |g, v| g.gather_rows(v[0], &[3, 1, 3, 0, 3]));
    check!("transpose", [t(&[3, 5])], |g, v| g.transpose(v[0]));
    check!("gate_mix", [t(&[4, 1]), t(&[4, 3]), t(&[4, 3])], |g, v| g.gate_mix(v[0], v[1], v[2]));
    check!("weighted_sum", [t(&[1, 3]), t(&[2, 4]), t(&[2, 4]), t(&[2, 4])], |g, v| g
        .weighted_sum(v[0], &v[1..]));
    check!("sum", [t(&[3, 4])], |g, v| g.sum(v[0]));
    {
        let leaves = vec![t(&[6, 5])];
        let f = |g: &mut Graph<f64>, v: &[Var]| g.cross_entropy(v[0], &[0, 4, 2, 2, 1, 3]);
        out.push(("cross_entropy", grad_check(&leaves, h, &f).worst_leaf));
    }
    for (name, kind) in [
        ("attention_raster", MaskKind::RasterCausal),
        ("attention_diagonal", MaskKind::DiagonalCausal),
    ] {
        let spec = causal_spec(kind, 1, 2, 3, 2);
        let rows = 2 * spec.seq_len;
        let leaves = vec![t(&[rows, 4]), t(&[rows, 4]), t(&[rows, 4])];
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.attention(v[0], v[1], v[2], spec.clone())?;
            project(g, y, seed ^ 0xdef)
        };
        out.push((name, grad_check(&leaves, h, &f).worst_leaf));
    }
    out
}

/// Token ids for a batch of random grids, alternating conditional and
/// unconditional prefixes.
pub fn random_ids(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let mut ids = Vec::new();
    for b in 0..batch {
        let grid = random_grid(&mut r, cfg.height, cfg.width, cfg.vocab_size);
        let cond = if b % 2 == 0 {
            Condition::Class(r.random_range(0..cfg.num_classes))
        } else {
            Condition::Unconditional
        };
        ids.extend(cfg.sequence(&grid, cond).unwrap());
    }
    ids
}

/// Gradcheck of the full training objective of a randomized dual-head model
/// with respect to every parameter. Returns the worst per-tensor relative
/// error and the number of scalars checked.
pub fn dual_gradcheck(seed: u64) -> (f64, usize) {
    let cfg = tiny_config(3, 4, seed);
    let model = random_dual::<f64>(&cfg, 2, seed);
    let ids = random_ids(&cfg, 2, seed + 1);
    let mask = cfg.mask(MaskKind::DiagonalCausal);
    let loss = |m: &DualHeadModel<f64>, g: &mut Graph<f64>, train: bool| -> (Var, BTreeMap<String, Var>) {
        let w = m.bind(g, &|_| train).unwrap();
        let out = dual_graph(g, &m.config, &m.branch, &w, &ids, 2, &mask, GateMode::Learned).unwrap();
        let l = compute_losses(g, &out, &LossWeights::default()).unwrap();
        let mut names = BTreeMap::new();
        w.visit(&mut |n, v| {
            names.insert(n, *v);
        });
        (l.total, names)
    };
    let mut g = Graph::new();
    let (total, vars) = loss(&model, &mut g, true);
    g.backward(total).unwrap();
    let value_at = |m: &DualHeadModel<f64>| {
        let mut g = Graph::new();
        let (total, _) = loss(m, &mut g, false);
        g.value(total).data()[0]
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in &vars {
        let analytic = g.grad_or_zero(*var);
        let numel = analytic.len();
        let mut numeric = Vec::with_capacity(numel);
        for j in 0..numel {
            let mut up = model.clone();
            let mut down = model.clone();
            let poke = |m: &mut DualHeadModel<f64>, delta: f64| {
                m.weights.visit_mut(&mut |n, t| {
                    if &n == name {
                        t.data_mut()[j] += delta;
                    }
                })
            };
            poke(&mut up, h);
            poke(&mut down, -h);
            numeric.push((value_at(&up) - value_at(&down)) / (2.0 * h));
        }
        checked += numel;
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    (worst, checked)
}

/// Random three-layer perceptron with a cross-entropy loss, checked at the
/// precision of `T` with finite-difference step `h`.
pub fn mlp_gradcheck<T: Scalar>(seed: u64, h: f64) -> GradCheck {
    let mut r = rng(seed);
    let dims = [6, 10, 8, 4];
    let mut leaves: Vec<Tensor<T>> = vec![random_tensor(&mut r, &[5, dims[0]], 1.0)];
    for w in dims.windows(2) {
        let scale = 1.0 / (w[0] as f64).sqrt();
        leaves.push(random_tensor(&mut r, &[w[0], w[1]], 4.0 * scale));
        leaves.push(random_tensor(&mut r, &[w[1]], 0.5));
    }
    let targets = [0, 3, 1, 2, 3];
    let f = |g: &mut Graph<T>, v: &[Var]| -> Result<Var> {
        let mut x = v[0];
        for layer in 0..3 {
            x = g.matmul(x, v[1 + 2 * layer])?;
            x = g.add_row(x, v[2 + 2 * layer])?;
            if layer < 2 {
                x = g.silu(x)?;
            }
        }
        g.cross_entropy(x, &targets)
    };
    grad_check(&leaves, h, &f)
}

/// Incremental-versus-full agreement for one greedy decode.
#[derive(Clone, Copy, Debug)]
pub struct Equivalence {
    pub max_abs_diff: f64,
    pub argmax_identical: bool,
}

impl Equivalence {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_abs_diff <= tol && self.argmax_identical
    }
}

fn compare(decoded: &Decoded<f32>, full: &[f32], v: usize) -> Equivalence {
    let max_abs_diff = decoded
        .logits
        .data()
        .iter()
        .zip(full)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    let argmax_identical = full
        .chunks_exact(v)
        .zip(decoded.grid.tokens())
        .all(|(row, &t)| argmax(row) == t as usize);
    Equivalence {
        max_abs_diff,
        argmax_identical,
    }
}

/// Greedy raster and diagonal decodes of a random model, each checked
/// against a teacher-forced full forward over the decoded grid.
pub fn cache_equivalence(h: usize, w: usize, seed: u64) -> (Equivalence, Equivalence) {
    let cfg = tiny_config(h, w, seed);
    let dual = random_dual::<f32>(&cfg, 1 + (seed as usize % 2), seed);
    let raster = dual.horizontal_backbone();
    let mut r = rng(seed);
    let cond = Condition::Class(r.random_range(0..cfg.num_classes));
    let greedy = SamplerConfig::greedy();
    let v = cfg.vocab_size;

    let dec = decode_raster(&raster, cond, &greedy, &CfgConfig::disabled()).unwrap();
    let ids = cfg.sequence(&dec.grid, cond).unwrap();
    let full = raster.forward_full(&ids, 1, &cfg.mask(MaskKind::RasterCausal)).unwrap();
    let rows: Vec<f32> = (0..cfg.grid_len())
        .flat_map(|i| full.logits.row(cfg.prefix_len - 1 + i).to_vec())
        .collect();
    let raster_eq = compare(&dec, &rows, v);

    let dec = decode_diagonal(&dual, cond, &greedy, &CfgConfig::disabled()).unwrap();
    let ids = cfg.sequence(&dec.grid, cond).unwrap();
    let full = dual
        .forward_full(&ids, 1, &cfg.mask(MaskKind::DiagonalCausal), GateMode::Learned)
        .unwrap();
    let diag_eq = compare(&dec, full.fused.data(), v);
    (raster_eq, diag_eq)
}

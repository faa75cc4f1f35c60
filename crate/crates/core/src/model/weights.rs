//! Parameter containers, generic over the slot type so the same structure
//! holds tensors (`P = Tensor<T>`) or graph handles (`P = Var`).

use crate::error::Result;

macro_rules! weight_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $(pub $field: P,)+
        }

        impl<P> $name<P> {
            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }

            pub fn try_map<Q>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &P) -> Result<Q>,
            ) -> Result<$name<Q>> {
                Ok($name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)?,)+
                })
            }
        }
    };
}

weight_struct!(
    /// One pre-norm transformer layer: attention projections, feed-forward
    /// weights and the two normalization gains.
    LayerWeights { attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2 }
);

weight_struct!(
    /// Output head: final normalization gain and vocabulary projection.
    HeadWeights { norm, proj }
);

weight_struct!(
    /// Token table (image tokens, class ids, unconditional id) plus learned
    /// prefix-position, row and column tables.
    EmbedWeights { tokens, prefix_pos, rows, cols }
);

weight_struct!(
    /// Two-layer perceptron over concatenated predecessor states.
    GateWeights { w1, b1, w2, b2 }
);

fn visit_layers<'a, P>(
    layers: &'a [LayerWeights<P>],
    prefix: &str,
    first: usize,
    f: &mut dyn FnMut(String, &'a P),
) {
    for (i, l) in layers.iter().enumerate() {
        l.visit(&format!("{prefix}{}.", first + i), f);
    }
}

fn visit_layers_mut<P>(
    layers: &mut [LayerWeights<P>],
    prefix: &str,
    first: usize,
    f: &mut dyn FnMut(String, &mut P),
) {
    for (i, l) in layers.iter_mut().enumerate() {
        l.visit_mut(&format!("{prefix}{}.", first + i), f);
    }
}

fn map_layers<P, Q>(
    layers: &[LayerWeights<P>],
    prefix: &str,
    first: usize,
    f: &mut dyn FnMut(&str, &P) -> Result<Q>,
) -> Result<Vec<LayerWeights<Q>>> {
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.try_map(&format!("{prefix}{}.", first + i), f))
        .collect()
}

/// Raster backbone: embeddings, `L` layers and the original output head.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<P> {
    pub embed: EmbedWeights<P>,
    pub layers: Vec<LayerWeights<P>>,
    pub head: HeadWeights<P>,
}

impl<P> BackboneWeights<P> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        self.embed.visit("embed.", f);
        visit_layers(&self.layers, "layers.", 0, f);
        self.head.visit("head.", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        self.embed.visit_mut("embed.", f);
        visit_layers_mut(&mut self.layers, "layers.", 0, f);
        self.head.visit_mut("head.", f);
    }

    pub fn try_map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Result<Q>) -> Result<BackboneWeights<Q>> {
        Ok(BackboneWeights {
            embed: self.embed.try_map("embed.", f)?,
            layers: map_layers(&self.layers, "layers.", 0, f)?,
            head: self.head.try_map("head.", f)?,
        })
    }
}

/// Dual-head model: the backbone (trunk + horizontal block + `Head^H`), the
/// vertical block clone, `Head^V` and the fusion gate. Vertical layers keep
/// the index of the layer they were cloned from.
#[derive(Clone, Debug, PartialEq)]
pub struct DualWeights<P> {
    pub base: BackboneWeights<P>,
    pub vertical: Vec<LayerWeights<P>>,
    pub head_v: HeadWeights<P>,
    pub gate: GateWeights<P>,
}

impl<P> DualWeights<P> {
    fn depth(&self) -> usize {
        self.base.layers.len() - self.vertical.len()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        self.base.visit(f);
        visit_layers(&self.vertical, "vertical.", self.depth(), f);
        self.head_v.visit("head_v.", f);
        self.gate.visit("gate.", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        let depth = self.depth();
        self.base.visit_mut(f);
        visit_layers_mut(&mut self.vertical, "vertical.", depth, f);
        self.head_v.visit_mut("head_v.", f);
        self.gate.visit_mut("gate.", f);
    }

    pub fn try_map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Result<Q>) -> Result<DualWeights<Q>> {
        Ok(DualWeights {
            base: self.base.try_map(f)?,
            vertical: map_layers(&self.vertical, "vertical.", self.depth(), f)?,
            head_v: self.head_v.try_map("head_v.", f)?,
            gate: self.gate.try_map("gate.", f)?,
        })
    }
}

/// Whether AdamW weight decay applies to a parameter: projection matrices
/// only, never embeddings, normalization gains or biases.
pub fn is_decayed(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "wq" | "wk" | "wv" | "wo" | "w1" | "w2" | "proj")
}

/// Parameters that exist only in the dual-head model.
pub fn is_new_component(name: &str) -> bool {
    name.starts_with("vertical.") || name.starts_with("head_v.") || name.starts_with("gate.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_selection() {
        assert!(is_decayed("layers.0.wq"));
        assert!(is_decayed("gate.w2"));
        assert!(is_decayed("head_v.proj"));
        assert!(!is_decayed("gate.b1"));
        assert!(!is_decayed("embed.tokens"));
        assert!(!is_decayed("layers.3.attn_norm"));
    }
}

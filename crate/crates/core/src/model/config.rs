use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MaskKind, MaskSpec, TokenGrid};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    /// Image-token vocabulary size `V`.
    pub vocab_size: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub prefix_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            d_model: 256,
            num_heads: 8,
            head_dim: 32,
            ffn_dim: 1024,
            vocab_size: 64,
            num_classes: 8,
            height: 16,
            width: 16,
            prefix_len: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model != self.num_heads * self.head_dim || self.d_model == 0 {
            return bad(format!(
                "d_model {} != heads {} x head_dim {}",
                self.d_model, self.num_heads, self.head_dim
            ));
        }
        if self.num_layers < 2 {
            return bad(format!("need at least 2 layers, got {}", self.num_layers));
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!("grid {}x{}", self.height, self.width));
        }
        if self.prefix_len == 0 {
            return bad("prefix length must be at least 1".into());
        }
        if self.vocab_size < 2 || self.num_classes == 0 || self.ffn_dim == 0 {
            return bad(format!(
                "vocab {}, classes {}, ffn {}",
                self.vocab_size, self.num_classes, self.ffn_dim
            ));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.prefix_len + self.height * self.width
    }

    pub fn grid_len(&self) -> usize {
        self.height * self.width
    }

    /// Rows of the token embedding table: image tokens, class ids and the
    /// reserved unconditional id.
    pub fn embed_rows(&self) -> usize {
        self.vocab_size + self.num_classes + 1
    }

    pub fn unconditional_id(&self) -> usize {
        self.vocab_size + self.num_classes
    }

    pub fn mask(&self, kind: MaskKind) -> MaskSpec {
        MaskSpec {
            kind,
            prefix_len: self.prefix_len,
            height: self.height,
            width: self.width,
        }
    }

    /// Flat token ids of `prefix + grid` for one sample.
    pub fn sequence(&self, grid: &TokenGrid, condition: Condition) -> Result<Vec<usize>> {
        if (grid.height(), grid.width()) != (self.height, self.width) {
            return Err(Error::ConfigMismatch(format!(
                "grid {}x{} vs model {}x{}",
                grid.height(),
                grid.width(),
                self.height,
                self.width
            )));
        }
        let mut ids = self.prefix_ids(condition)?;
        ids.extend(grid.tokens().iter().map(|&t| t as usize));
        Ok(ids)
    }

    pub fn prefix_ids(&self, condition: Condition) -> Result<Vec<usize>> {
        let id = condition.token_id(self)?;
        Ok(vec![id; self.prefix_len])
    }
}

/// Generation condition: a class label or the reserved unconditional slot
/// used for classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Unconditional,
}

impl Condition {
    pub fn token_id(self, config: &ModelConfig) -> Result<usize> {
        match self {
            Condition::Class(c) if c < config.num_classes => Ok(config.vocab_size + c),
            Condition::Class(c) => Err(Error::UnknownClass(c)),
            Condition::Unconditional => Ok(config.unconditional_id()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    /// Trunk depth `m`; the top `L - m` layers are duplicated.
    pub depth: usize,
    pub num_layers: usize,
}

impl BranchConfig {
    pub fn new(depth: usize, num_layers: usize) -> Result<Self> {
        if depth == 0 || depth > num_layers {
            return Err(Error::InvalidBranchDepth {
                m: depth,
                layers: num_layers,
            });
        }
        Ok(Self { depth, num_layers })
    }

    pub fn top_layers(&self) -> usize {
        self.num_layers - self.depth
    }
}

use std::fmt;

use serde::{Deserialize, Serialize};

use super::ExpansionError;
use crate::numerics::Matrix;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // √(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// `y = W·x + b` with one neuron per row of `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn new(weight: Matrix) -> Self {
        Self { weight, bias: None }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Applies the layer to every column of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, ExpansionError> {
        let mut y = self.weight.matmul(x)?;
        if let Some(b) = &self.bias {
            y.add_row_bias(b);
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Up,
    Down,
}

/// Position of a linear layer in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn up(block: usize) -> Self {
        Self {
            block,
            kind: LayerKind::Up,
        }
    }

    pub fn down(block: usize) -> Self {
        Self {
            block,
            kind: LayerKind::Down,
        }
    }

    /// Position among all linear layers: `2·block` for up, `+1` for down.
    pub fn ordinal(&self) -> usize {
        2 * self.block + usize::from(self.kind == LayerKind::Down)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            LayerKind::Up => "up",
            LayerKind::Down => "down",
        };
        write!(f, "b{}.{}", self.block, kind)
    }
}

/// `down(gelu(up(x)))`, plus `x` when `residual` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnBlock {
    pub up: Linear,
    pub down: Linear,
    pub residual: bool,
}

/// A stack of FFN blocks over `d`-dimensional column vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub blocks: Vec<FfnBlock>,
}

impl ToyModel {
    pub fn new(blocks: Vec<FfnBlock>) -> Result<Self, ExpansionError> {
        let model = Self { blocks };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn check_shapes(&self) -> Result<(), ExpansionError> {
        let mut width = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let d = b.up.in_dim();
            let bad = |what: &str| ExpansionError::Shape(format!("block {i}: {what}"));
            if width.is_some_and(|w| w != d) {
                return Err(bad("input width differs from previous block output"));
            }
            if b.down.in_dim() != b.up.out_dim() {
                return Err(bad("down input width differs from up output width"));
            }
            if b.residual && b.down.out_dim() != d {
                return Err(bad("residual block must preserve width"));
            }
            for l in [&b.up, &b.down] {
                if l.bias.as_ref().is_some_and(|v| v.len() != l.out_dim()) {
                    return Err(bad("bias length differs from layer height"));
                }
            }
            width = Some(b.down.out_dim());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.up.in_dim())
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.down.out_dim())
    }

    pub fn layer(&self, id: LayerId) -> &Linear {
        let b = &self.blocks[id.block];
        match id.kind {
            LayerKind::Up => &b.up,
            LayerKind::Down => &b.down,
        }
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut Linear {
        let b = &mut self.blocks[id.block];
        match id.kind {
            LayerKind::Up => &mut b.up,
            LayerKind::Down => &mut b.down,
        }
    }

    /// All linear layers in execution order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.blocks.len())
            .flat_map(|b| [LayerId::up(b), LayerId::down(b)])
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, ExpansionError> {
        let mut x = x.clone();
        for b in &self.blocks {
            let h = b.up.forward(&x)?.map(gelu);
            let mut y = b.down.forward(&h)?;
            if b.residual {
                y = y.add(&x)?;
            }
            x = y;
        }
        Ok(x)
    }

    /// The input seen by every linear layer when `x` is fed through the
    /// model, in execution order.
    pub fn layer_inputs(&self, x: &Matrix) -> Result<Vec<(LayerId, Matrix)>, ExpansionError> {
        let mut out = Vec::with_capacity(2 * self.blocks.len());
        let mut x = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let h = b.up.forward(&x)?.map(gelu);
            let mut y = b.down.forward(&h)?;
            if b.residual {
                y = y.add(&x)?;
            }
            out.push((LayerId::up(i), x));
            out.push((LayerId::down(i), h));
            x = y;
        }
        Ok(out)
    }

    pub fn dense_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.up.weight.len() + b.down.weight.len())
            .sum()
    }
}

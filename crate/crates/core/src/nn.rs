//! Convolution parameter bundles shared by the network modules.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamStore};

/// Weight `[c_out, c_in, k, k]` and bias `[c_out]` of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Var,
}

impl ConvParams {
    /// Registers `{name}.weight` (Xavier) and `{name}.bias` (zeros).
    pub fn register(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        store.register(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::Xavier)?;
        store.register(&format!("{name}.bias"), &[c_out], Init::Zeros)
    }

    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(ConvParams {
            weight: bound.get(&format!("{name}.weight"))?,
            bias: bound.get(&format!("{name}.bias"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias)
    }

    pub fn apply_strided(&self, g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
        g.conv2d_strided(x, self.weight, self.bias, stride)
    }

    /// Convolution followed by ReLU.
    pub fn apply_relu(&self, g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
        let y = g.conv2d_strided(x, self.weight, self.bias, stride)?;
        Ok(g.relu(y))
    }
}

//! Foreground-background separation: two sigmoid gates (one from the aligned
//! high-level map, one from the enhanced low-level map) are summed, fused by
//! a 3×3 convolution and a sigmoid, and the resulting spatial mask gates the
//! enhanced features before a 3×3 refinement convolution.
//!
//! ```text
//! M_h = σ(ψ_h2(relu(ψ_h1(P_h))))
//! M_l = σ(ψ_l2(relu(ψ_l1(C))))
//! M   = σ(φ_f(M_h + M_l))
//! F   = relu(φ_r(C ⊙ M))
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ConvParams;
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskChannels {
    /// One spatial mask broadcast over all channels.
    Single,
    /// One mask per feature channel.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbsmConfig {
    /// Hidden width of the gate branches; `None` means `max(C_l / 4, 4)`.
    pub gate_width: Option<usize>,
    pub mask_channels: MaskChannels,
    /// Adds `C` inside the final ReLU: `relu(φ_r(C ⊙ M) + C)`.
    pub residual: bool,
}

impl Default for FbsmConfig {
    fn default() -> Self {
        FbsmConfig { gate_width: None, mask_channels: MaskChannels::Single, residual: false }
    }
}

impl FbsmConfig {
    pub fn hidden_width(&self, c_low: usize) -> usize {
        self.gate_width.unwrap_or((c_low / 4).max(4))
    }

    fn mask_width(&self, c_low: usize) -> usize {
        match self.mask_channels {
            MaskChannels::Single => 1,
            MaskChannels::PerChannel => c_low,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FbsmParams {
    pub high1: ConvParams,
    pub high2: ConvParams,
    pub low1: ConvParams,
    pub low2: ConvParams,
    pub fuse: ConvParams,
    pub refine: ConvParams,
    pub residual: bool,
}

impl FbsmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        c_high: usize,
        c_low: usize,
        cfg: &FbsmConfig,
    ) -> Result<()> {
        let hidden = cfg.hidden_width(c_low);
        let m = cfg.mask_width(c_low);
        ConvParams::register(store, &format!("{prefix}.high1"), c_high, hidden, 3)?;
        ConvParams::register(store, &format!("{prefix}.high2"), hidden, m, 1)?;
        ConvParams::register(store, &format!("{prefix}.low1"), c_low, hidden, 3)?;
        ConvParams::register(store, &format!("{prefix}.low2"), hidden, m, 1)?;
        ConvParams::register(store, &format!("{prefix}.fuse"), m, m, 3)?;
        ConvParams::register(store, &format!("{prefix}.refine"), c_low, c_low, 3)
    }

    pub fn bind(bound: &Bound, prefix: &str, cfg: &FbsmConfig) -> Result<Self> {
        let c = |n: &str| ConvParams::bind(bound, &format!("{prefix}.{n}"));
        Ok(FbsmParams {
            high1: c("high1")?,
            high2: c("high2")?,
            low1: c("low1")?,
            low2: c("low2")?,
            fuse: c("fuse")?,
            refine: c("refine")?,
            residual: cfg.residual,
        })
    }
}

/// `σ(ψ2(relu(ψ1(x))))`.
pub fn gate(g: &mut Graph, x: Var, psi1: &ConvParams, psi2: &ConvParams) -> Result<Var> {
    let hidden = psi1.apply(g, x)?;
    let hidden = g.relu(hidden);
    let logits = psi2.apply(g, hidden)?;
    Ok(g.sigmoid(logits))
}

/// `σ(φ_f(M_h + M_l))`; no activation between the convolution and the sigmoid.
pub fn fuse_gates(g: &mut Graph, mask_high: Var, mask_low: Var, phi: &ConvParams) -> Result<Var> {
    let (_, a, b) = g.value(mask_high).chw()?;
    let (_, c, d) = g.value(mask_low).chw()?;
    if (a, b) != (c, d) {
        return Err(Error::shape("fuse_gates", format!("{a}x{b} vs {c}x{d}")));
    }
    let sum = g.add(mask_high, mask_low)?;
    let logits = phi.apply(g, sum)?;
    Ok(g.sigmoid(logits))
}

/// Every intermediate of one FBSM pass.
#[derive(Debug, Clone, Copy)]
pub struct FbsmTrace {
    pub mask_high: Var,
    pub mask_low: Var,
    pub mask: Var,
    pub gated: Var,
    pub output: Var,
}

pub fn fbsm_trace(g: &mut Graph, p_high_aligned: Var, enhanced: Var, params: &FbsmParams) -> Result<FbsmTrace> {
    let (_, hh, wh) = g.value(p_high_aligned).chw()?;
    let (_, hl, wl) = g.value(enhanced).chw()?;
    if (hh, wh) != (hl, wl) {
        return Err(Error::shape(
            "fbsm_forward",
            format!("aligned high-level map is {hh}x{wh}, enhanced map is {hl}x{wl}"),
        ));
    }
    let mask_high = gate(g, p_high_aligned, &params.high1, &params.high2)?;
    let mask_low = gate(g, enhanced, &params.low1, &params.low2)?;
    let mask = fuse_gates(g, mask_high, mask_low, &params.fuse)?;
    let gated = g.mul_mask(enhanced, mask)?;
    let refined = params.refine.apply(g, gated)?;
    let pre = if params.residual { g.add(refined, enhanced)? } else { refined };
    let output = g.relu(pre);
    Ok(FbsmTrace { mask_high, mask_low, mask, gated, output })
}

/// Refined low-level features, same shape as `enhanced`, all entries `>= 0`.
pub fn fbsm_forward(g: &mut Graph, p_high_aligned: Var, enhanced: Var, params: &FbsmParams) -> Result<Var> {
    Ok(fbsm_trace(g, p_high_aligned, enhanced, params)?.output)
}

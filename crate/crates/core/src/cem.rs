//! Context enhancement: a global context vector pooled from a high-level map
//! is projected to the low-level channel width and broadcast-added onto the
//! low-level map.
//!
//! ```text
//! c_g = relu(W_p · maxpool(P_h) + b_p)        [C_l]
//! C   = P_l + c_g (broadcast over H×W)       [C_l, H, W]
//! ```

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ConvParams;
use crate::params::{Bound, ParamStore};

/// Projection `W_p: [C_l, C_h, 1, 1]`, `b_p: [C_l]`.
#[derive(Debug, Clone, Copy)]
pub struct CemParams {
    pub proj: ConvParams,
}

impl CemParams {
    pub fn register(store: &mut ParamStore, prefix: &str, c_high: usize, c_low: usize) -> Result<()> {
        ConvParams::register(store, &format!("{prefix}.proj"), c_high, c_low, 1)
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(CemParams { proj: ConvParams::bind(bound, &format!("{prefix}.proj"))? })
    }
}

/// Pool-then-project global context vector `[C_l]`; entries are `>= 0`.
pub fn global_context(g: &mut Graph, p_high: Var, params: &CemParams) -> Result<Var> {
    let pooled = g.adaptive_max_pool_1x1(p_high)?;
    let c = g.value(pooled).len();
    let col = g.reshape(pooled, &[c, 1, 1])?;
    let proj = params.proj.apply(g, col)?;
    let proj = g.relu(proj);
    let c_low = g.value(proj).len();
    g.reshape(proj, &[c_low])
}

/// Enhanced low-level map with the same shape as `p_low`.
pub fn cem_forward(g: &mut Graph, p_high_aligned: Var, p_low: Var, params: &CemParams) -> Result<Var> {
    let (_, hh, wh) = g.value(p_high_aligned).chw()?;
    let (_, hl, wl) = g.value(p_low).chw()?;
    if (hh, wh) != (hl, wl) {
        return Err(Error::shape(
            "cem_forward",
            format!("aligned high-level map is {hh}x{wh}, low-level map is {hl}x{wl}"),
        ));
    }
    let ctx = global_context(g, p_high_aligned, params)?;
    g.broadcast_add_channel(p_low, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tensor::Tensor;

    fn setup(c_h: usize, c_l: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new(seed);
        CemParams::register(&mut s, "cem", c_h, c_l).unwrap();
        s
    }

    #[test]
    fn zero_input_zero_params_gives_zero_context() {
        let mut s = setup(4, 3, 0);
        s.zero_prefix("cem");
        let mut g = Graph::new();
        let p = CemParams::bind(&s.bind(&mut g), "cem").unwrap();
        let ph = g.constant(Tensor::zeros(&[4, 5, 5]));
        let c = global_context(&mut g, ph, &p).unwrap();
        assert_eq!(g.value(c).data(), &[0.0; 3]);
    }

    #[test]
    fn constant_input_identity_projection() {
        let mut s = ParamStore::new(0);
        s.register("cem.proj.weight", &[3, 3, 1, 1], Init::Zeros).unwrap();
        s.register("cem.proj.bias", &[3], Init::Zeros).unwrap();
        let w = s.get_mut("cem.proj.weight").unwrap();
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        for c in [2.5, -1.0] {
            let mut g = Graph::new();
            let p = CemParams::bind(&s.bind(&mut g), "cem").unwrap();
            let ph = g.constant(Tensor::full(&[3, 4, 4], c));
            let ctx = global_context(&mut g, ph, &p).unwrap();
            assert_eq!(g.value(ctx).data(), &[f64::max(c, 0.0); 3]);
        }
    }

    #[test]
    fn zero_params_pass_low_level_through() {
        let mut s = setup(4, 2, 1);
        s.zero_prefix("cem");
        let mut g = Graph::new();
        let p = CemParams::bind(&s.bind(&mut g), "cem").unwrap();
        let ph = g.constant(Tensor::from_fn(&[4, 3, 3], |i| (i as f64).sin()));
        let low = Tensor::from_fn(&[2, 3, 3], |i| (i as f64 * 0.7).cos());
        let pl = g.constant(low.clone());
        let out = cem_forward(&mut g, ph, pl, &p).unwrap();
        assert!(g.value(out).bit_eq(&low));
    }

    #[test]
    fn rejects_mismatches() {
        let s = setup(4, 2, 1);
        let mut g = Graph::new();
        let p = CemParams::bind(&s.bind(&mut g), "cem").unwrap();
        let ph = g.constant(Tensor::zeros(&[4, 3, 3]));
        let pl = g.constant(Tensor::zeros(&[2, 4, 4]));
        assert!(cem_forward(&mut g, ph, pl, &p).is_err());
        let wrong = g.constant(Tensor::zeros(&[5, 3, 3]));
        let pl = g.constant(Tensor::zeros(&[2, 3, 3]));
        assert!(cem_forward(&mut g, wrong, pl, &p).is_err());
    }
}

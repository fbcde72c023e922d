//! Randomized finite-difference cases, one family per differentiable op or
//! module. Shapes and values are drawn from the case seed.

use std::collections::BTreeMap;

use efpn_core::cem::{cem_forward, CemParams};
use efpn_core::fbsm::{fbsm_forward, FbsmParams};
use efpn_core::graph::{RegressionKind, Var};
use efpn_core::harness::model::{head_forward, HeadParams};
use efpn_core::nn::ConvParams;
use efpn_core::pyramid::{backbone_forward, build_fpn, efpn_bs_forward, BackboneParams, Enhancer, FpnParams, Level, PyramidSet};
use efpn_core::tensor::Tensor;
use efpn_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{fd_check, rand_tensor, rng, weighted_sum, FdOutcome};

pub const FAMILIES: [&str; 22] = [
    "conv2d_3x3",
    "conv2d_1x1",
    "conv2d_3x3_stride2",
    "relu",
    "sigmoid",
    "add",
    "hadamard",
    "broadcast_add_channel",
    "mul_mask",
    "adaptive_max_pool_1x1",
    "max_pool2",
    "bilinear_upsample",
    "upsample_nearest",
    "bce_with_logits",
    "smooth_l1",
    "dcloss_k_delta",
    "cem",
    "fbsm",
    "fbsm_per_channel_residual",
    "head",
    "cem_fbsm_dcloss",
    "backbone_fpn_enhance",
];

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn conv(v: &[Var], w: usize) -> ConvParams {
    ConvParams { weight: v[w], bias: v[w + 1] }
}

/// Appends weight and bias tensors of a `k×k` convolution.
fn push_conv(r: &mut ChaCha8Rng, t: &mut Vec<Tensor>, c_in: usize, c_out: usize, k: usize) -> usize {
    let a = (6.0 / ((c_in + c_out) * k * k) as f64).sqrt();
    t.push(rand_tensor(r, &[c_out, c_in, k, k], a));
    t.push(rand_tensor(r, &[c_out], 0.3));
    t.len() - 2
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Indices of the FBSM tensors appended after position `base`.
fn push_fbsm(r: &mut ChaCha8Rng, t: &mut Vec<Tensor>, c_h: usize, c_l: usize, hidden: usize, m: usize) -> usize {
    let base = t.len();
    push_conv(r, t, c_h, hidden, 3);
    push_conv(r, t, hidden, m, 1);
    push_conv(r, t, c_l, hidden, 3);
    push_conv(r, t, hidden, m, 1);
    push_conv(r, t, m, m, 3);
    push_conv(r, t, c_l, c_l, 3);
    base
}

fn fbsm_params(v: &[Var], base: usize, residual: bool) -> FbsmParams {
    FbsmParams {
        high1: conv(v, base),
        high2: conv(v, base + 2),
        low1: conv(v, base + 4),
        low2: conv(v, base + 6),
        fuse: conv(v, base + 8),
        refine: conv(v, base + 10),
        residual,
    }
}

pub fn run_case(family: usize, seed: u64) -> Result<FdOutcome> {
    let mut r = rng(seed.wrapping_mul(1_000_003).wrapping_add(family as u64));
    let r = &mut r;
    let ws = seed ^ family as u64;
    match FAMILIES[family] {
        "conv2d_3x3" | "conv2d_1x1" | "conv2d_3x3_stride2" => {
            let k = if FAMILIES[family] == "conv2d_1x1" { 1 } else { 3 };
            let stride = if FAMILIES[family].ends_with("stride2") { 2 } else { 1 };
            let (ci, co, h, w) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 2, 7), dim(r, 2, 7));
            let mut t = vec![rand_tensor(r, &[ci, h, w], 1.0)];
            push_conv(r, &mut t, ci, co, k);
            fd_check(&t, &all(3), None, |g, v| {
                let y = g.conv2d_strided(v[0], v[1], v[2], stride)?;
                weighted_sum(g, y, ws)
            })
        }
        "relu" | "sigmoid" => {
            let relu = FAMILIES[family] == "relu";
            let dims = [dim(r, 1, 3), dim(r, 1, 6), dim(r, 1, 6)];
            let x = rand_tensor(r, &dims, 3.0);
            fd_check(&[x], &[0], None, |g, v| {
                let y = if relu { g.relu(v[0]) } else { g.sigmoid(v[0]) };
                weighted_sum(g, y, ws)
            })
        }
        "add" | "hadamard" => {
            let dims = [dim(r, 1, 3), dim(r, 1, 5), dim(r, 1, 5)];
            let t = vec![rand_tensor(r, &dims, 2.0), rand_tensor(r, &dims, 2.0)];
            let add = FAMILIES[family] == "add";
            fd_check(&t, &[0, 1], None, |g, v| {
                let y = if add { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
                weighted_sum(g, y, ws)
            })
        }
        "broadcast_add_channel" => {
            let (c, h, w) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5));
            let t = vec![rand_tensor(r, &[c, h, w], 1.0), rand_tensor(r, &[c], 1.0)];
            fd_check(&t, &[0, 1], None, |g, v| {
                let y = g.broadcast_add_channel(v[0], v[1])?;
                weighted_sum(g, y, ws)
            })
        }
        "mul_mask" => {
            let (c, h, w) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5));
            let mc = if r.random_bool(0.5) { 1 } else { c };
            let t = vec![rand_tensor(r, &[c, h, w], 1.0), rand_tensor(r, &[mc, h, w], 1.0)];
            fd_check(&t, &[0, 1], None, |g, v| {
                let y = g.mul_mask(v[0], v[1])?;
                weighted_sum(g, y, ws)
            })
        }
        "adaptive_max_pool_1x1" | "max_pool2" => {
            let global = FAMILIES[family] == "adaptive_max_pool_1x1";
            let dims = [dim(r, 1, 3), dim(r, 1, 7), dim(r, 1, 7)];
            let x = rand_tensor(r, &dims, 1.0);
            fd_check(&[x], &[0], None, |g, v| {
                let y = if global { g.adaptive_max_pool_1x1(v[0])? } else { g.max_pool2(v[0])? };
                weighted_sum(g, y, ws)
            })
        }
        "bilinear_upsample" | "upsample_nearest" => {
            let (c, h, w) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            let target = (h + dim(r, 0, 5), w + dim(r, 0, 5));
            let bil = FAMILIES[family] == "bilinear_upsample";
            let x = rand_tensor(r, &[c, h, w], 1.0);
            fd_check(&[x], &[0], None, |g, v| {
                let y = if bil { g.bilinear_upsample(v[0], target)? } else { g.upsample_nearest(v[0], target)? };
                weighted_sum(g, y, ws)
            })
        }
        "bce_with_logits" => {
            let dims = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)];
            let z = rand_tensor(r, &dims, 4.0);
            let target = Tensor::from_fn(&dims, |_| if r.random_bool(0.3) { 1.0 } else { 0.0 });
            let weight = Tensor::from_fn(&dims, |_| r.random_range(0.0..2.0));
            fd_check(&[z], &[0], None, |g, v| g.bce_with_logits(v[0], target.clone(), weight.clone()))
        }
        "smooth_l1" => {
            let dims = [4, dim(r, 1, 4), dim(r, 1, 4)];
            let pred = rand_tensor(r, &dims, 2.0);
            let target = rand_tensor(r, &dims, 2.0);
            let weight = Tensor::from_fn(&dims, |_| r.random_range(0.0..1.0));
            let beta = r.random_range(0.1..1.5);
            fd_check(&[pred], &[0], None, |g, v| {
                g.regression_loss(v[0], target.clone(), weight.clone(), RegressionKind::SmoothL1 { beta })
            })
        }
        "dcloss_k_delta" => {
            let dims = [4, dim(r, 1, 4), dim(r, 1, 4)];
            let pred = rand_tensor(r, &dims, 1.5);
            let target = rand_tensor(r, &dims, 1.5);
            let weight = Tensor::from_fn(&dims, |_| r.random_range(0.0..1.0));
            let swap = r.random_bool(0.3);
            let t = vec![pred, Tensor::scalar(r.random_range(1.0..20.0)), Tensor::scalar(r.random_range(0.05..0.5))];
            fd_check(&t, &all(3), None, |g, v| {
                let kind = RegressionKind::DcLoss { k: v[1], delta: v[2], swap_weights: swap };
                g.regression_loss(v[0], target.clone(), weight.clone(), kind)
            })
        }
        "cem" => {
            let (ch, cl, h, w) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 2, 6), dim(r, 2, 6));
            let mut t = vec![rand_tensor(r, &[ch, h, w], 1.0), rand_tensor(r, &[cl, h, w], 1.0)];
            push_conv(r, &mut t, ch, cl, 1);
            fd_check(&t, &all(4), None, |g, v| {
                let y = cem_forward(g, v[0], v[1], &CemParams { proj: conv(v, 2) })?;
                weighted_sum(g, y, ws)
            })
        }
        "fbsm" | "fbsm_per_channel_residual" => {
            let variant = FAMILIES[family] != "fbsm";
            let (ch, cl, h, w) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 2, 6), dim(r, 2, 6));
            let hidden = dim(r, 1, 3);
            let m = if variant { cl } else { 1 };
            let mut t = vec![rand_tensor(r, &[ch, h, w], 1.0), rand_tensor(r, &[cl, h, w], 1.0)];
            let base = push_fbsm(r, &mut t, ch, cl, hidden, m);
            fd_check(&t, &all(t.len()), None, |g, v| {
                let y = fbsm_forward(g, v[0], v[1], &fbsm_params(v, base, variant))?;
                weighted_sum(g, y, ws)
            })
        }
        "head" => {
            let (c, k) = (dim(r, 2, 4), dim(r, 1, 3));
            let mut t = vec![rand_tensor(r, &[c, 8, 8], 1.0), rand_tensor(r, &[c, 4, 4], 1.0)];
            push_conv(r, &mut t, c, c, 3);
            push_conv(r, &mut t, c, k, 3);
            push_conv(r, &mut t, c, 4, 3);
            let n = t.len();
            fd_check(&t, &(2..n).collect::<Vec<_>>(), None, |g, v| {
                let pyr = PyramidSet::new(BTreeMap::from([(Level::P2, v[0]), (Level::P3, v[1])]));
                let head = HeadParams { shared: conv(v, 2), cls: conv(v, 4), reg: conv(v, 6) };
                let outs = head_forward(g, &pyr, &[Level::P2, Level::P3], &head)?;
                let mut acc = None;
                for (i, o) in outs.iter().enumerate() {
                    let s = g.sigmoid(o.cls);
                    let a = weighted_sum(g, s, ws + i as u64)?;
                    let b = weighted_sum(g, o.reg, ws + 10 + i as u64)?;
                    let ab = g.add(a, b)?;
                    acc = Some(match acc {
                        None => ab,
                        Some(prev) => g.add(prev, ab)?,
                    });
                }
                Ok(acc.expect("two levels"))
            })
        }
        "cem_fbsm_dcloss" => {
            let (c, hidden) = (dim(r, 2, 4), dim(r, 1, 3));
            let mut t = vec![rand_tensor(r, &[c, 8, 8], 1.0), rand_tensor(r, &[c, 8, 8], 1.0)];
            push_conv(r, &mut t, c, c, 1);
            let base = push_fbsm(r, &mut t, c, c, hidden, 1);
            t.push(Tensor::scalar(r.random_range(2.0..15.0)));
            t.push(Tensor::scalar(r.random_range(0.05..0.4)));
            let target = rand_tensor(r, &[c, 8, 8], 1.0);
            let weight = Tensor::full(&[c, 8, 8], 1.0 / 64.0);
            let n = t.len();
            fd_check(&t, &(2..n).collect::<Vec<_>>(), None, |g, v| {
                let e = cem_forward(g, v[0], v[1], &CemParams { proj: conv(v, 2) })?;
                let f = fbsm_forward(g, v[0], e, &fbsm_params(v, base, false))?;
                let kind = RegressionKind::DcLoss { k: v[n - 2], delta: v[n - 1], swap_weights: false };
                g.regression_loss(f, target.clone(), weight.clone(), kind)
            })
        }
        "backbone_fpn_enhance" => {
            let c = 3;
            let mut t = vec![rand_tensor(r, &[2, 64, 64], 1.0)];
            let mut c_in = 2;
            let mut convs = Vec::new();
            for _ in 0..5 {
                convs.push(push_conv(r, &mut t, c_in, c, 3));
                c_in = c;
            }
            let lat: Vec<usize> = (0..4).map(|_| push_conv(r, &mut t, c, c, 1)).collect();
            let smo: Vec<usize> = (0..4).map(|_| push_conv(r, &mut t, c, c, 3)).collect();
            let cem = push_conv(r, &mut t, c, c, 1);
            let fb = push_fbsm(r, &mut t, c, c, 2, 1);
            let n = t.len();
            fd_check(&t, &(1..n).collect::<Vec<_>>(), Some(3), |g, v| {
                let bb = BackboneParams {
                    stem: conv(v, convs[0]),
                    stages: [conv(v, convs[1]), conv(v, convs[2]), conv(v, convs[3]), conv(v, convs[4])],
                };
                let fpn = FpnParams {
                    lateral: [0, 1, 2, 3].map(|i| conv(v, lat[i])),
                    smooth: [0, 1, 2, 3].map(|i| conv(v, smo[i])),
                };
                let feats = backbone_forward(g, v[0], &bb)?;
                let pyr = build_fpn(g, &feats, &fpn)?;
                let enh = Enhancer { level: Level::P2, cem: CemParams { proj: conv(v, cem) }, fbsm: fbsm_params(v, fb, false) };
                let out = efpn_bs_forward(g, &pyr, &[enh], true)?;
                let mut acc = weighted_sum(g, out.get(Level::P2)?, ws)?;
                for l in [Level::P3, Level::P6] {
                    let s = weighted_sum(g, out.get(l)?, ws + l.index() as u64)?;
                    acc = g.add(acc, s)?;
                }
                Ok(acc)
            })
        }
        other => unreachable!("unknown family {other}"),
    }
}

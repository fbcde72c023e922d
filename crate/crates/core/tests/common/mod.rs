//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod cases;

use efpn_core::assign::{iou, AssignConfig, BBox, Label};
use efpn_core::graph::{Graph, Var};
use efpn_core::harness::eval::Detection;
use efpn_core::synth::GtBox;
use efpn_core::tensor::Tensor;
use efpn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(dims, |_| r.random_range(-scale..scale))
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-4;
pub const FD_MIN_STEP: f64 = 1e-7;
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Debug, Default, Clone)]
pub struct FdOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub analytic: Vec<Vec<f64>>,
}

fn build<F>(inputs: &[Tensor], wrt: &[usize], f: &F) -> Result<(Graph, Var, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if wrt.contains(&i) { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    Ok((g, out, vars))
}

/// Central differences of the scalar `f` against reverse mode. A probe whose
/// perturbation changes a branch decision (graph signature) is retried with a
/// halved step and skipped below `FD_MIN_STEP`. `probes` caps the number of
/// evenly spaced elements checked per tensor.
pub fn fd_check<F>(inputs: &[Tensor], wrt: &[usize], probes: Option<usize>, f: F) -> Result<FdOutcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, out, vars) = build(inputs, wrt, &f)?;
    let sig = g.signature();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|&i| g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]))
        .collect();
    let eval = |x: &[Tensor]| -> Result<(f64, u64)> {
        let (g, out, _) = build(x, wrt, &f)?;
        Ok((g.value(out).item(), g.signature()))
    };
    let mut res = FdOutcome::default();
    let mut work = inputs.to_vec();
    for (slot, &i) in wrt.iter().enumerate() {
        let n = inputs[i].len();
        let idxs: Vec<usize> = match probes {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        for e in idxs {
            let x0 = inputs[i].data()[e];
            let mut h = FD_STEP;
            let numeric = loop {
                work[i].data_mut()[e] = x0 + h;
                let (fp, sp) = eval(&work)?;
                work[i].data_mut()[e] = x0 - h;
                let (fm, sm) = eval(&work)?;
                work[i].data_mut()[e] = x0;
                if sp == sig && sm == sig {
                    break Some((fp - fm) / (2.0 * h));
                }
                h /= 2.0;
                if h < FD_MIN_STEP {
                    break None;
                }
            };
            let Some(num) = numeric else {
                res.skipped += 1;
                continue;
            };
            let a = analytic[slot][e];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(FD_FLOOR);
            res.checked += 1;
            if err > res.max_rel_err || res.worst.is_none() {
                res.max_rel_err = res.max_rel_err.max(err);
                res.worst = Some((i, e, a, num));
            }
        }
    }
    res.analytic = analytic;
    Ok(res)
}

/// `sum(x ⊙ r)` for a fixed random weighting `r`, so that every output
/// element contributes with a distinct coefficient.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = rand_tensor(&mut r, g.value(x).dims(), 1.0);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

/// Five-point central difference of a scalar function.
pub fn diff5(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

// ---------------------------------------------------------------------------
// Scalar reference implementations
// ---------------------------------------------------------------------------

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Same-padded 3×3 / 1×1 cross-correlation, one output value at a time.
pub fn conv_ref(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (ci, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (co, k) = (w.dims()[0], w.dims()[2]);
    let pad = (k / 2) as isize;
    let oh = (h + 2 * (k / 2) - k) / stride + 1;
    let ow = (wd + 2 * (k / 2) - k) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b.data()[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad;
                            let ix = (xx * stride + kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += x.at3(c, iy as usize, ix as usize) * w.data()[((o * ci + c) * k + ky) * k + kx];
                        }
                    }
                }
                out.data_mut()[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    out
}

pub fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.dims(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.dims(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

/// Half-pixel-centre bilinear sample of one channel at output `(oy, ox)`.
pub fn bilinear_ref(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let lo = (p.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, if hi == lo { 0.0 } else { p - lo as f64 })
    };
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, h, oh);
            for xx in 0..ow {
                let (x0, x1, fx) = coord(xx, w, ow);
                let v = (1.0 - fy) * (1.0 - fx) * x.at3(ch, y0, x0)
                    + (1.0 - fy) * fx * x.at3(ch, y0, x1)
                    + fy * (1.0 - fx) * x.at3(ch, y1, x0)
                    + fy * fx * x.at3(ch, y1, x1);
                out.data_mut()[(ch * oh + y) * ow + xx] = v;
            }
        }
    }
    out
}

pub fn nearest_ref(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        x.at3(ch, y * h / oh, xx * w / ow)
    })
}

pub fn maxpool2_ref(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut m = f64::NEG_INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                let (yy, xs) = (2 * y + dy, 2 * xx + dx);
                if yy < h && xs < w {
                    m = m.max(x.at3(ch, yy, xs));
                }
            }
        }
        m
    })
}

/// `relu(W · maxpool(P_h) + b)` computed entry by entry.
pub fn global_context_ref(p_high: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (ch, h, wd) = (p_high.dims()[0], p_high.dims()[1], p_high.dims()[2]);
    let pooled: Vec<f64> = (0..ch)
        .map(|c| (0..h * wd).map(|i| p_high.data()[c * h * wd + i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let cl = w.dims()[0];
    (0..cl).map(|o| (b.data()[o] + (0..ch).map(|c| w.data()[o * ch + c] * pooled[c]).sum::<f64>()).max(0.0)).collect()
}

pub fn gate_ref(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    let hidden = map(&conv_ref(x, w1, b1, 1), |v| v.max(0.0));
    map(&conv_ref(&hidden, w2, b2, 1), sig)
}

pub fn fuse_ref(mh: &Tensor, ml: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    map(&conv_ref(&zip(mh, ml, |a, c| a + c), w, b, 1), sig)
}

// ---------------------------------------------------------------------------
// Brute-force assignment
// ---------------------------------------------------------------------------

/// Scores the full anchor × gt IoU matrix, then labels every anchor from
/// its row and applies each gt's column maximum in gt order.
pub fn assign_oracle(anchors: &[BBox], gts: &[BBox], cfg: &AssignConfig) -> Vec<Label> {
    let m: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut labels: Vec<Label> = m
        .iter()
        .map(|row| {
            if row.is_empty() {
                return Label::Negative;
            }
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let gi = row.iter().position(|&v| v == best).unwrap();
            if best >= cfg.pos_thr {
                Label::Positive(gi)
            } else if best < cfg.neg_thr {
                Label::Negative
            } else {
                Label::Ignored
            }
        })
        .collect();
    if cfg.force_best_match {
        for gi in 0..gts.len() {
            let best = m.iter().map(|r| r[gi]).fold(f64::NEG_INFINITY, f64::max);
            if best > 0.0 {
                let ai = m.iter().position(|r| r[gi] == best).unwrap();
                labels[ai] = Label::Positive(gi);
            }
        }
    }
    labels
}

// ---------------------------------------------------------------------------
// Brute-force average precision
// ---------------------------------------------------------------------------

/// Single-class AP by enumerating every distinct score threshold. For each
/// threshold the detections at or above it are matched from scratch (score
/// order, ties by input order; each takes the unmatched gt of highest IoU
/// `>= thr`, lowest index on ties) and exact precision and recall are
/// recorded. AP sums recall increments times the best precision reached at
/// that recall or beyond.
pub fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], thr: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(Vec::len).sum();
    if npos == 0 {
        return None;
    }
    let mut scores: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for &t in &scores {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (d, g) in dets.iter().zip(gts) {
            let mut order: Vec<usize> = (0..d.len()).filter(|&i| d[i].score >= t).collect();
            order.sort_by(|&a, &b| d[b].score.total_cmp(&d[a].score).then(a.cmp(&b)));
            let mut used = vec![false; g.len()];
            for i in order {
                let mut best: Option<usize> = None;
                for j in 0..g.len() {
                    let v = iou(&d[i].bbox, &g[j].bbox);
                    if !used[j] && v >= thr && best.is_none_or(|b| v > iou(&d[i].bbox, &g[b].bbox)) {
                        best = Some(j);
                    }
                }
                match best {
                    Some(j) => {
                        used[j] = true;
                        tp += 1;
                    }
                    None => fp += 1,
                }
            }
        }
        points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn rand_box(r: &mut ChaCha8Rng, size: f64) -> BBox {
    let w = r.random_range(2.0..12.0);
    let h = r.random_range(2.0..12.0);
    let x = r.random_range(0.0..size - w);
    let y = r.random_range(0.0..size - h);
    BBox { x1: x, y1: y, x2: x + w, y2: y + h }
}

fn jitter(r: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let mut d = [0.0; 4];
    for v in &mut d {
        *v = r.random_range(-amount..amount);
    }
    let x1 = b.x1 + d[0];
    let y1 = b.y1 + d[1];
    BBox { x1, y1, x2: (b.x2 + d[2]).max(x1 + 0.5), y2: (b.y2 + d[3]).max(y1 + 0.5) }
}

/// Random single-class instance over 1..=3 images with at most `max_gts`
/// gts and `max_dets` detections in total. Scores are drawn from a coarse
/// grid so that ties occur.
pub fn random_ap_instance(seed: u64, max_gts: usize, max_dets: usize) -> (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) {
    let mut r = rng(seed);
    let images = r.random_range(1..=3usize);
    let n_gt = r.random_range(1..=max_gts);
    let n_det = r.random_range(0..=max_dets);
    let mut gts = vec![Vec::new(); images];
    for _ in 0..n_gt {
        let i = r.random_range(0..images);
        gts[i].push(GtBox { bbox: rand_box(&mut r, 40.0), category: 0 });
    }
    let mut dets = vec![Vec::new(); images];
    for _ in 0..n_det {
        let i = r.random_range(0..images);
        let bbox = if !gts[i].is_empty() && r.random_bool(0.7) {
            let j = r.random_range(0..gts[i].len());
            jitter(&mut r, &gts[i][j].bbox, 2.0)
        } else {
            rand_box(&mut r, 40.0)
        };
        let score = r.random_range(1..=10u32) as f64 / 10.0;
        dets[i].push(Detection { bbox, category: 0, score });
    }
    (dets, gts)
}

//! Forward/backward kernels on raw `[C, H, W]` slices.
//!
//! Everything here is single-threaded and performs reductions in a fixed
//! order, so repeated calls are bitwise reproducible.

/// Geometry of a same-padded 2D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad_h(&self) -> usize {
        self.kh / 2
    }

    pub fn pad_w(&self) -> usize {
        self.kw / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h() - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w() - self.kw) / self.stride + 1
    }

    /// Output column range `[lo, hi)` whose input column `ox*s + kx - pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad_w() as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((self.w as isize - 1 - off).div_euclid(s) + 1).clamp(0, self.out_w() as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad_h() as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.c_out * ho * wo];
    let s = g.stride;
    let pw = g.pad_w();
    for co in 0..g.c_out {
        let oc = &mut out[co * ho * wo..(co + 1) * ho * wo];
        oc.fill(bias[co]);
        for ci in 0..g.c_in {
            let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weight[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row = &plane[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut oc[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let src = &row[lo + kx - pw..hi + kx - pw];
                            for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * row[ox * s + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients for input, weight and bias given the output gradient.
/// Any of the destination buffers may be `None` when that gradient is not needed.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let s = g.stride;
    let pw = g.pad_w();
    if let Some(gb) = grad_b {
        for co in 0..g.c_out {
            gb[co] += grad_out[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
        }
    }
    for co in 0..g.c_out {
        let go = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = weight[widx];
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &go[oy * wo..(oy + 1) * wo];
                        let roff = base + iy * g.w;
                        if grad_w.is_some() {
                            let row = &input[roff..roff + g.w];
                            for ox in lo..hi {
                                acc += grow[ox] * row[ox * s + kx - pw];
                            }
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let row = &mut gi[roff..roff + g.w];
                            for ox in lo..hi {
                                row[ox * s + kx - pw] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(gw) = grad_w.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Per-channel maximum over all spatial positions; returns values and the
/// flat argmax index (first in row-major order on ties).
pub fn global_max(input: &[f64], c: usize, hw: usize) -> (Vec<f64>, Vec<usize>) {
    let mut vals = Vec::with_capacity(c);
    let mut idx = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        vals.push(plane[best]);
        idx.push(ch * hw + best);
    }
    (vals, idx)
}

/// 2×2 max pooling with stride 2 and ceil-mode output size.
pub fn max_pool2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut vals = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = usize::MAX;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        let i = (ch * h + y) * w + x;
                        if best == usize::MAX || input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                vals.push(input[best]);
                idx.push(best);
            }
        }
    }
    (vals, idx, ho, wo)
}

/// Source taps for one axis under half-pixel-center alignment.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

pub fn bilinear_forward(input: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &input[ch * h * w..(ch + 1) * h * w];
        for y in &ty {
            for x in &tx {
                let top = p[y.i0 * w + x.i0] * (1.0 - x.frac) + p[y.i0 * w + x.i1] * x.frac;
                let bot = p[y.i1 * w + x.i0] * (1.0 - x.frac) + p[y.i1 * w + x.i1] * x.frac;
                out.push(top * (1.0 - y.frac) + bot * y.frac);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward(grad_out: &[f64], grad_in: &mut [f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for ch in 0..c {
        let gi = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        for (yy, y) in ty.iter().enumerate() {
            for (xx, x) in tx.iter().enumerate() {
                let g = go[yy * ow + xx];
                gi[y.i0 * w + x.i0] += g * (1.0 - y.frac) * (1.0 - x.frac);
                gi[y.i0 * w + x.i1] += g * (1.0 - y.frac) * x.frac;
                gi[y.i1 * w + x.i0] += g * y.frac * (1.0 - x.frac);
                gi[y.i1 * w + x.i1] += g * y.frac * x.frac;
            }
        }
    }
}

/// Nearest-neighbour source index per output position (`floor(i * src / dst)`).
pub fn nearest_index(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| (i * src / dst).min(src - 1)).collect()
}

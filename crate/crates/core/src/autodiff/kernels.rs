//! Slice-level forward/backward kernels for the spatial and dense layers.
//!
//! All image buffers are `[N, H, W, C]` row-major; convolution kernels are
//! `[k, k, Cin, Cout]` so the innermost loops run over contiguous output
//! channels.

use super::tensor::Scalar;

/// Spatial padding mode of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output has the input's spatial size; out-of-bounds taps read zero.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(n: usize, h: usize, w: usize, cin: usize, k: usize, cout: usize, padding: Padding) -> Option<Self> {
        let (pad, oh, ow) = match padding {
            Padding::Same => (k / 2, h, w),
            Padding::Valid => {
                if h < k || w < k {
                    return None;
                }
                (0, h - k + 1, w - k + 1)
            }
        };
        Some(Self { n, h, w, cin, k, cout, pad, oh, ow })
    }

    /// Input coordinate hit by output `o` and tap `t`, if in bounds.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o + t).checked_sub(self.pad)?;
        (p < limit).then_some(p)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * g.cout];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_base = ((n * g.oh + oy) * g.ow + ox) * g.cout;
                let acc = &mut out[o_base..o_base + g.cout];
                acc.copy_from_slice(bias);
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let i_base = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let k_base = (ky * g.k + kx) * g.cin;
                        for ci in 0..g.cin {
                            let a = x[i_base + ci];
                            if a == T::zero() {
                                continue;
                            }
                            let row = &kernel[(k_base + ci) * g.cout..(k_base + ci + 1) * g.cout];
                            for (o, &kv) in acc.iter_mut().zip(row) {
                                *o = *o + a * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients into whichever of `dx`, `dk`, `db` are requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_base = ((n * g.oh + oy) * g.ow + ox) * g.cout;
                let grad = &dy[o_base..o_base + g.cout];
                if let Some(db) = db.as_deref_mut() {
                    for (b, &gv) in db.iter_mut().zip(grad) {
                        *b = *b + gv;
                    }
                }
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let i_base = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let k_base = (ky * g.k + kx) * g.cin;
                        for ci in 0..g.cin {
                            let r = (k_base + ci) * g.cout..(k_base + ci + 1) * g.cout;
                            if let Some(dx) = dx.as_deref_mut() {
                                let mut s = T::zero();
                                for (&kv, &gv) in kernel[r.clone()].iter().zip(grad) {
                                    s = s + kv * gv;
                                }
                                dx[i_base + ci] = dx[i_base + ci] + s;
                            }
                            if let Some(dk) = dk.as_deref_mut() {
                                let a = x[i_base + ci];
                                if a != T::zero() {
                                    for (d, &gv) in dk[r].iter_mut().zip(grad) {
                                        *d = *d + a * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Marks a max-pool output that came from the implicit zero padding.
pub(crate) const FROM_PAD: usize = usize::MAX;

/// 2x2 stride-2 max pooling with "same" semantics. Partial windows at odd
/// edges include the zero padding. Returns the output and, per output cell,
/// the flat input index that won (or [`FROM_PAD`]).
pub(crate) fn max_pool_forward<T: Scalar>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = FROM_PAD;
                    let mut best_v = T::zero();
                    let mut cells = 0;
                    for dy in 0..2 {
                        let iy = 2 * oy + dy;
                        if iy >= h {
                            continue;
                        }
                        for dx in 0..2 {
                            let ix = 2 * ox + dx;
                            if ix >= w {
                                continue;
                            }
                            cells += 1;
                            let idx = ((b * h + iy) * w + ix) * c + ch;
                            if best == FROM_PAD || x[idx] > best_v {
                                best = idx;
                                best_v = x[idx];
                            }
                        }
                    }
                    if cells < 4 && best_v < T::zero() {
                        best = FROM_PAD;
                        best_v = T::zero();
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// 2x2 stride-2 average pooling; partial windows divide by their real-cell count.
pub(crate) fn avg_pool_forward<T: Scalar>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = ((b * oh + oy) * ow + ox) * c;
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let count = T::lit((ys.len() * xs.len()) as f64);
                for iy in ys {
                    for ix in xs.clone() {
                        let i_base = ((b * h + iy) * w + ix) * c;
                        for ch in 0..c {
                            out[o_base + ch] = out[o_base + ch] + x[i_base + ch];
                        }
                    }
                }
                for v in &mut out[o_base..o_base + c] {
                    *v = *v / count;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(dy: &[T], dx: &mut [T], n: usize, h: usize, w: usize, c: usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = ((b * oh + oy) * ow + ox) * c;
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let count = T::lit((ys.len() * xs.len()) as f64);
                for iy in ys {
                    for ix in xs.clone() {
                        let i_base = ((b * h + iy) * w + ix) * c;
                        for ch in 0..c {
                            dx[i_base + ch] = dx[i_base + ch] + dy[o_base + ch] / count;
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample_forward<T: Scalar>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = ((b * oh + oy) * ow + ox) * c;
                let i_base = ((b * h + oy / 2) * w + ox / 2) * c;
                out[o_base..o_base + c].copy_from_slice(&x[i_base..i_base + c]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(dy: &[T], dx: &mut [T], n: usize, h: usize, w: usize, c: usize) {
    let (oh, ow) = (2 * h, 2 * w);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = ((b * oh + oy) * ow + ox) * c;
                let i_base = ((b * h + oy / 2) * w + ox / 2) * c;
                for ch in 0..c {
                    dx[i_base + ch] = dx[i_base + ch] + dy[o_base + ch];
                }
            }
        }
    }
}

/// `out[b, j] = Σ_i x[b, i] · W[i, j] + bias[j]`.
pub(crate) fn dense_forward<T: Scalar>(x: &[T], weights: &[T], bias: &[T], n: usize, inputs: usize, units: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * units);
    for b in 0..n {
        out.extend_from_slice(bias);
        let acc = &mut out[b * units..(b + 1) * units];
        for i in 0..inputs {
            let a = x[b * inputs + i];
            if a == T::zero() {
                continue;
            }
            for (o, &wv) in acc.iter_mut().zip(&weights[i * units..(i + 1) * units]) {
                *o = *o + a * wv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    weights: &[T],
    dy: &[T],
    n: usize,
    inputs: usize,
    units: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    for b in 0..n {
        let grad = &dy[b * units..(b + 1) * units];
        if let Some(db) = db.as_deref_mut() {
            for (d, &gv) in db.iter_mut().zip(grad) {
                *d = *d + gv;
            }
        }
        for i in 0..inputs {
            let row = i * units..(i + 1) * units;
            if let Some(dx) = dx.as_deref_mut() {
                let mut s = T::zero();
                for (&wv, &gv) in weights[row.clone()].iter().zip(grad) {
                    s = s + wv * gv;
                }
                dx[b * inputs + i] = dx[b * inputs + i] + s;
            }
            if let Some(dw) = dw.as_deref_mut() {
                let a = x[b * inputs + i];
                if a != T::zero() {
                    for (d, &gv) in dw[row].iter_mut().zip(grad) {
                        *d = *d + a * gv;
                    }
                }
            }
        }
    }
}

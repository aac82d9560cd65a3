//! Dense kernels behind the graph ops. Parallel loops only split work along
//! the batch axis and reduce partial sums in a fixed order, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

/// Samples per partial weight-gradient sum.
const GRAD_CHUNK: usize = 4;

/// `c = a * b + beta * c` for strided row-major views.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    (rsc, csc): (usize, usize),
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rows: usize, cols: usize| (rows - 1) * r + (cols.max(1) - 1) * cc;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len(), "gemm: a out of bounds");
        assert!(last(rsb, csb, k, n) < b.len(), "gemm: b out of bounds");
    }
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: all accessed offsets were bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pt: usize,
    pub pl: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

/// `(before, after)` padding that yields `ceil(size / stride)` outputs.
pub fn same_padding(size: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(size);
    (total / 2, total - total / 2)
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_shape: &[usize],
        cout: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: [usize; 4],
        groups: usize,
        same: bool,
    ) -> ConvGeom {
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let [mut pt, mut pl, mut pb, mut pr] = pad;
        if same {
            (pt, pb) = same_padding(h, k.0, stride.0);
            (pl, pr) = same_padding(w, k.1, stride.1);
        }
        assert!(h + pt + pb >= k.0 && w + pl + pr >= k.1, "kernel larger than padded input");
        ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh: k.0,
            kw: k.1,
            sh: stride.0,
            sw: stride.1,
            pt,
            pl,
            groups,
            oh: (h + pt + pb - k.0) / stride.0 + 1,
            ow: (w + pl + pr - k.1) / stride.1 + 1,
        }
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pt == 0 && self.pl == 0
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }
}

#[inline]
fn in_range(base: usize, offset: usize, pad: usize, limit: usize) -> Option<usize> {
    (base + offset).checked_sub(pad).filter(|&v| v < limit)
}

fn im2col(x: &[f32], g: &ConvGeom, c0: usize, cols: &mut [f32]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin_g() {
        let plane = &x[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match in_range(oy * g.sh, ki, g.pt, g.h) {
                        None => out.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = in_range(ox * g.sw, kj, g.pl, g.w).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, c0: usize, dx: &mut [f32]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin_g() {
        let plane = &mut dx[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let Some(iy) = in_range(oy * g.sh, ki, g.pt, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = in_range(ox * g.sw, kj, g.pl, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward(x: &[f32], w: &[f32], out: &mut [f32], g: &ConvGeom) {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    for c in 0..g.cin {
        let xc = &x[c * hw..(c + 1) * hw];
        let wc = &w[c * kk..(c + 1) * kk];
        let oc = &mut out[c * ohw..(c + 1) * ohw];
        oc.fill(0.0);
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let wv = wc[ki * g.kw + kj];
                for oy in 0..g.oh {
                    let Some(iy) = in_range(oy * g.sh, ki, g.pt, g.h) else { continue };
                    let row = &xc[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut oc[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        if let Some(ix) = in_range(ox * g.sw, kj, g.pl, g.w) {
                            *o += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_input(dy: &[f32], w: &[f32], dx: &mut [f32], g: &ConvGeom) {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    for c in 0..g.cin {
        let dyc = &dy[c * ohw..(c + 1) * ohw];
        let wc = &w[c * kk..(c + 1) * kk];
        let dxc = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let wv = wc[ki * g.kw + kj];
                for oy in 0..g.oh {
                    let Some(iy) = in_range(oy * g.sh, ki, g.pt, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = in_range(ox * g.sw, kj, g.pl, g.w) {
                            dxc[iy * g.w + ix] += wv * dyc[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_weight(x: &[f32], dy: &[f32], dw: &mut [f32], g: &ConvGeom) {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    for c in 0..g.cin {
        let xc = &x[c * hw..(c + 1) * hw];
        let dyc = &dy[c * ohw..(c + 1) * ohw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let mut acc = 0.0f32;
                for oy in 0..g.oh {
                    let Some(iy) = in_range(oy * g.sh, ki, g.pt, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = in_range(ox * g.sw, kj, g.pl, g.w) {
                            acc += xc[iy * g.w + ix] * dyc[oy * g.ow + ox];
                        }
                    }
                }
                dw[c * kk + ki * g.kw + kj] += acc;
            }
        }
    }
}

fn conv_sample(x: &[f32], w: &[f32], out: &mut [f32], g: &ConvGeom) {
    if g.depthwise() {
        return depthwise_forward(x, w, out, g);
    }
    let (hw, ohw, kr) = (g.h * g.w, g.oh * g.ow, g.col_rows());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut cols = if g.pointwise() { Vec::new() } else { vec![0.0; kr * ohw] };
    for grp in 0..g.groups {
        let wg = &w[grp * cout_g * kr..(grp + 1) * cout_g * kr];
        let og = &mut out[grp * cout_g * ohw..(grp + 1) * cout_g * ohw];
        let b = if g.pointwise() {
            &x[grp * cin_g * hw..(grp + 1) * cin_g * hw]
        } else {
            im2col(x, g, grp * cin_g, &mut cols);
            &cols
        };
        gemm(cout_g, kr, ohw, wg, (kr, 1), b, (ohw, 1), og, (ohw, 1), 0.0);
    }
}

pub fn conv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (in_len, out_len) = (g.cin * g.h * g.w, g.cout * g.oh * g.ow);
    let mut out = vec![0.0; g.n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(i, o)| {
        conv_sample(&x[i * in_len..(i + 1) * in_len], w, o, g);
        if let Some(b) = bias {
            let ohw = g.oh * g.ow;
            for (c, plane) in o.chunks_mut(ohw).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[c]);
            }
        }
    });
    out
}

pub fn conv_backward_input(dy: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (in_len, out_len) = (g.cin * g.h * g.w, g.cout * g.oh * g.ow);
    let (hw, ohw, kr) = (g.h * g.w, g.oh * g.ow, g.col_rows());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut dx = vec![0.0; g.n * in_len];
    dx.par_chunks_mut(in_len).enumerate().for_each(|(i, dxs)| {
        let dys = &dy[i * out_len..(i + 1) * out_len];
        if g.depthwise() {
            return depthwise_backward_input(dys, w, dxs, g);
        }
        let mut dcols = if g.pointwise() { Vec::new() } else { vec![0.0; kr * ohw] };
        for grp in 0..g.groups {
            let wg = &w[grp * cout_g * kr..(grp + 1) * cout_g * kr];
            let dyg = &dys[grp * cout_g * ohw..(grp + 1) * cout_g * ohw];
            if g.pointwise() {
                let dxg = &mut dxs[grp * cin_g * hw..(grp + 1) * cin_g * hw];
                gemm(kr, cout_g, ohw, wg, (1, kr), dyg, (ohw, 1), dxg, (ohw, 1), 0.0);
            } else {
                gemm(kr, cout_g, ohw, wg, (1, kr), dyg, (ohw, 1), &mut dcols, (ohw, 1), 0.0);
                col2im(&dcols, g, grp * cin_g, dxs);
            }
        }
    });
    dx
}

pub fn conv_backward_weight(x: &[f32], dy: &[f32], w_len: usize, g: &ConvGeom) -> Vec<f32> {
    let (in_len, out_len) = (g.cin * g.h * g.w, g.cout * g.oh * g.ow);
    let (hw, ohw, kr) = (g.h * g.w, g.oh * g.ow, g.col_rows());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let starts: Vec<usize> = (0..g.n).step_by(GRAD_CHUNK).collect();
    let partials: Vec<Vec<f32>> = starts
        .par_iter()
        .map(|&start| {
            let mut dw = vec![0.0; w_len];
            let mut cols = if g.pointwise() || g.depthwise() { Vec::new() } else { vec![0.0; kr * ohw] };
            for i in start..(start + GRAD_CHUNK).min(g.n) {
                let xs = &x[i * in_len..(i + 1) * in_len];
                let dys = &dy[i * out_len..(i + 1) * out_len];
                if g.depthwise() {
                    depthwise_backward_weight(xs, dys, &mut dw, g);
                    continue;
                }
                for grp in 0..g.groups {
                    let dyg = &dys[grp * cout_g * ohw..(grp + 1) * cout_g * ohw];
                    let dwg = &mut dw[grp * cout_g * kr..(grp + 1) * cout_g * kr];
                    let b = if g.pointwise() {
                        &xs[grp * cin_g * hw..(grp + 1) * cin_g * hw]
                    } else {
                        im2col(xs, g, grp * cin_g, &mut cols);
                        &cols
                    };
                    gemm(cout_g, ohw, kr, dyg, (ohw, 1), b, (1, ohw), dwg, (kr, 1), 1.0);
                }
            }
            dw
        })
        .collect();
    let mut total = vec![0.0; w_len];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

pub fn conv_backward_bias(dy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ohw = g.oh * g.ow;
    let mut db = vec![0.0f32; g.cout];
    for sample in dy.chunks(g.cout * ohw) {
        for (c, plane) in sample.chunks(ohw).enumerate() {
            db[c] += plane.iter().sum::<f32>();
        }
    }
    db
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub k: (usize, usize),
    pub stride: (usize, usize),
    /// top, left, bottom, right
    pub pad: [usize; 4],
    pub ceil_mode: bool,
}

impl PoolGeom {
    pub fn new(k: usize, stride: usize, pad: usize) -> PoolGeom {
        PoolGeom {
            k: (k, k),
            stride: (stride, stride),
            pad: [pad; 4],
            ceil_mode: false,
        }
    }

    pub fn ceil(mut self) -> Self {
        self.ceil_mode = true;
        self
    }

    /// Asymmetric padding that keeps `ceil(size / stride)` outputs.
    pub fn same(k: usize, stride: usize, h: usize, w: usize) -> PoolGeom {
        let (pt, pb) = same_padding(h, k, stride);
        let (pl, pr) = same_padding(w, k, stride);
        PoolGeom {
            k: (k, k),
            stride: (stride, stride),
            pad: [pt, pl, pb, pr],
            ceil_mode: false,
        }
    }

    fn out_len(size: usize, k: usize, s: usize, before: usize, after: usize, ceil: bool) -> usize {
        let span = size + before + after - k;
        let mut out = if ceil { span.div_ceil(s) + 1 } else { span / s + 1 };
        if ceil && (out - 1) * s >= size + before {
            out -= 1;
        }
        out
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let [pt, pl, pb, pr] = self.pad;
        (
            Self::out_len(h, self.k.0, self.stride.0, pt, pb, self.ceil_mode),
            Self::out_len(w, self.k.1, self.stride.1, pl, pr, self.ceil_mode),
        )
    }
}

/// Max pooling over `(planes, h, w)`; padding never wins. Returns values and
/// the flat input index of each maximum.
pub fn max_pool(x: &[f32], planes: usize, h: usize, w: usize, p: &PoolGeom) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = p.out_hw(h, w);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(pi, (o, a))| {
            let base = pi * h * w;
            let plane = &x[base..base + h * w];
            for oy in 0..oh {
                let y0 = (oy * p.stride.0).saturating_sub(p.pad[0]);
                let y1 = (oy * p.stride.0 + p.k.0).saturating_sub(p.pad[0]).min(h);
                for ox in 0..ow {
                    let x0 = (ox * p.stride.1).saturating_sub(p.pad[1]);
                    let x1 = (ox * p.stride.1 + p.k.1).saturating_sub(p.pad[1]).min(w);
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = y0 * w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = plane[iy * w + ix];
                            if v > best || (v.is_nan() && !best.is_nan()) {
                                best = v;
                                best_i = iy * w + ix;
                            }
                        }
                    }
                    o[oy * ow + ox] = best;
                    a[oy * ow + ox] = (base + best_i) as u32;
                }
            }
        });
    (out, arg)
}

/// Average pooling without padding.
pub fn avg_pool(x: &[f32], planes: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<f32> {
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let scale = 1.0 / (k * k) as f32;
    let mut out = vec![0.0; planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(pi, o)| {
        let plane = &x[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for iy in oy * s..oy * s + k {
                    for ix in ox * s..ox * s + k {
                        acc += plane[iy * w + ix];
                    }
                }
                o[oy * ow + ox] = acc * scale;
            }
        }
    });
    out
}

pub fn avg_pool_backward(dy: &[f32], planes: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<f32> {
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let scale = 1.0 / (k * k) as f32;
    let mut dx = vec![0.0; planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(pi, d)| {
        let g = &dy[pi * oh * ow..(pi + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] * scale;
                for iy in oy * s..oy * s + k {
                    for ix in ox * s..ox * s + k {
                        d[iy * w + ix] += v;
                    }
                }
            }
        }
    });
    dx
}

/// Bilinear resampling weights, half-pixel centers, edge clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMap {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// Four `(input index, weight)` taps per output pixel.
    pub taps: Vec<[(u32, f32); 4]>,
}

impl ResampleMap {
    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> ResampleMap {
        let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
            let scale = n_in as f32 / n_out as f32;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    let l1 = src - i0 as f32;
                    (i0, i1, l1)
                })
                .collect()
        };
        let ys = axis(in_hw.0, out_hw.0);
        let xs = axis(in_hw.1, out_hw.1);
        let mut taps = Vec::with_capacity(out_hw.0 * out_hw.1);
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let w = in_hw.1;
                taps.push([
                    ((y0 * w + x0) as u32, (1.0 - ly) * (1.0 - lx)),
                    ((y0 * w + x1) as u32, (1.0 - ly) * lx),
                    ((y1 * w + x0) as u32, ly * (1.0 - lx)),
                    ((y1 * w + x1) as u32, ly * lx),
                ]);
            }
        }
        ResampleMap { in_hw, out_hw, taps }
    }

    pub fn apply(&self, x: &[f32], planes: usize) -> Vec<f32> {
        let (ihw, ohw) = (self.in_hw.0 * self.in_hw.1, self.out_hw.0 * self.out_hw.1);
        let mut out = vec![0.0; planes * ohw];
        for p in 0..planes {
            let src = &x[p * ihw..(p + 1) * ihw];
            for (o, taps) in out[p * ohw..(p + 1) * ohw].iter_mut().zip(&self.taps) {
                *o = taps.iter().map(|&(i, w)| src[i as usize] * w).sum();
            }
        }
        out
    }

    pub fn backward(&self, dy: &[f32], planes: usize) -> Vec<f32> {
        let (ihw, ohw) = (self.in_hw.0 * self.in_hw.1, self.out_hw.0 * self.out_hw.1);
        let mut dx = vec![0.0; planes * ihw];
        for p in 0..planes {
            let d = &mut dx[p * ihw..(p + 1) * ihw];
            for (g, taps) in dy[p * ohw..(p + 1) * ohw].iter().zip(&self.taps) {
                for &(i, w) in taps {
                    d[i as usize] += g * w;
                }
            }
        }
        dx
    }
}

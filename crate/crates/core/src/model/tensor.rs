//! NCHW `f32` tensors and a tape recording the layer set of the networks.
//!
//! Parameters are not graph nodes: convolutions refer to them by index into
//! the parameter slice the graph borrows, and `backward` returns one gradient
//! buffer per parameter. Per-sample work runs in parallel; cross-sample
//! reductions are summed in sample order so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "{} values for tensor shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }
}

/// Zero padding on each side of the spatial dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Output size equals input size; odd remainder goes to bottom/right.
    pub fn same(k: usize) -> Self {
        let a = (k - 1) / 2;
        let b = k - 1 - a;
        Padding {
            top: a,
            bottom: b,
            left: a,
            right: b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Conv {
        x: usize,
        w: usize,
        b: usize,
        pad: Padding,
    },
    Relu(usize),
    MaxPool {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample(usize),
    Concat(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    pub params: Vec<Vec<f32>>,
    nodes: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient with respect to a graph node (e.g. an input), if it was reached.
    pub fn of(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].as_deref()
    }
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfold one sample `[cin, h, w]` into `[cin·kh·kw, ho·wo]` patch columns.
fn im2col(x: &[f32], d: &ConvDims, pad: Padding, cols: &mut [f32]) {
    let hw = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x_lo = pad.left.saturating_sub(kx);
                let x_hi = (d.w + pad.left).saturating_sub(kx).min(d.wo);
                for oy in 0..d.ho {
                    let out = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    let iy = oy as isize + ky as isize - pad.top as isize;
                    if iy < 0 || iy >= d.h as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let s0 = x_lo + kx - pad.left;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate patch columns back into `[cin, h, w]`.
fn col2im(cols: &[f32], d: &ConvDims, pad: Padding, dx: &mut [f32]) {
    let hw = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x_lo = pad.left.saturating_sub(kx);
                let x_hi = (d.w + pad.left).saturating_sub(kx).min(d.wo);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..d.ho {
                    let iy = oy as isize + ky as isize - pad.top as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let s0 = x_lo + kx - pad.left;
                    let dst = &mut plane[iy as usize * d.w + s0..iy as usize * d.w + s0 + (x_hi - x_lo)];
                    for (a, &g) in dst.iter_mut().zip(&src[oy * d.wo + x_lo..oy * d.wo + x_hi]) {
                        *a += g;
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    // SAFETY: strides and extents describe sub-ranges of the given slices,
    // checked by the debug assertions below.
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m * n <= c.len());
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
            n as isize,
            1,
        );
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Which side of every ReLU kink each input lies on and which element
    /// wins every pooling window. Two forward passes with equal patterns lie
    /// in the same piece of the piecewise-smooth graph function.
    pub fn switch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.nodes[*x].value.data.iter().map(|&v| (v > 0.0) as u32)),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn conv_dims(&self, x: &Tensor, w: usize, pad: Padding) -> Result<ConvDims> {
        let wt = self
            .params
            .get(w)
            .ok_or_else(|| Error::Shape(format!("no parameter {w}")))?;
        let [n, cin, h, wd] = x.shape;
        let [cout, wcin, kh, kw] = wt.shape;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv weight expects {wcin} input channels, got {cin}"
            )));
        }
        let hp = h + pad.top + pad.bottom;
        let wp = wd + pad.left + pad.right;
        if hp < kh || wp < kw {
            return Err(Error::Shape(format!(
                "{kh}x{kw} kernel larger than padded input {hp}x{wp}"
            )));
        }
        Ok(ConvDims {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho: hp - kh + 1,
            wo: wp - kw + 1,
        })
    }

    /// 2-D cross-correlation with weight `[cout, cin, kh, kw]` (param `w`)
    /// and bias `[1, cout, 1, 1]` (param `b`).
    pub fn conv2d(&mut self, x: Var, w: usize, b: usize, pad: Padding) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let d = self.conv_dims(xt, w, pad)?;
        let bias = &self.params[b];
        if bias.len() != d.cout {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                d.cout
            )));
        }
        let wt = &self.params[w].data;
        let hw = d.ho * d.wo;
        let k = d.patch();
        let mut out = Tensor::zeros([d.n, d.cout, d.ho, d.wo]);
        let in_len = xt.item_len();
        out.data
            .par_chunks_mut(d.cout * hw)
            .zip(xt.data.par_chunks(in_len))
            .for_each(|(o, xi)| {
                let mut cols = vec![0.0f32; k * hw];
                im2col(xi, &d, pad, &mut cols);
                for (co, row) in o.chunks_mut(hw).enumerate() {
                    row.fill(bias.data[co]);
                }
                gemm(d.cout, k, hw, wt, (k, 1), &cols, (hw, 1), 1.0, o);
            });
        Ok(self.push(out, Op::Conv { x: x.0, w, b, pad }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor {
            shape: t.shape,
            data: t.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(x.0))
    }

    /// 2x2 max pooling with stride 2; H and W must be even.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let [n, c, h, w] = t.shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("maxpool needs even dims, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let src = &t.data[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for idx in [best + 1, best + w, best + w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out.data[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x: x.0, argmax }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let [n, c, h, w] = t.shape;
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for p in 0..n * c {
            let src = &t.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample(x.0))
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let [n, ca, h, w] = ta.shape;
        let [nb, cb, hb, wb] = tb.shape;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat of {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..n {
            data.extend_from_slice(&ta.data[i * ca * h * w..(i + 1) * ca * h * w]);
            data.extend_from_slice(&tb.data[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let out = Tensor {
            shape: [n, ca + cb, h, w],
            data,
        };
        Ok(self.push(out, Op::Concat(a.0, b.0)))
    }

    /// Reverse pass seeded with `d loss / d out`.
    pub fn backward(&self, out: Var, seed: &[f32]) -> Result<Gradients> {
        if seed.len() != self.nodes[out.0].value.len() {
            return Err(Error::Shape(format!(
                "seed gradient has {} entries for {} outputs",
                seed.len(),
                self.nodes[out.0].value.len()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<Vec<f32>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        grads[out.0] = Some(seed.to_vec());
        fn acc(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value.data;
                    let dst = acc(&mut grads[*x], xv.len());
                    for ((d, &gv), &v) in dst.iter_mut().zip(&g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let xt = &self.nodes[*x].value;
                    let plane_in = xt.shape[2] * xt.shape[3];
                    let plane_out = plane_in / 4;
                    let dst = acc(&mut grads[*x], xt.len());
                    for (o, (&gv, &a)) in g.iter().zip(argmax).enumerate() {
                        dst[(o / plane_out) * plane_in + a as usize] += gv;
                    }
                }
                Op::Upsample(x) => {
                    let xt = &self.nodes[*x].value;
                    let [n, c, h, w] = xt.shape;
                    let dst = acc(&mut grads[*x], xt.len());
                    for p in 0..n * c {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let d = &mut dst[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let ta = &self.nodes[*a].value;
                    let tb = &self.nodes[*b].value;
                    let (la, lb) = (ta.item_len(), tb.item_len());
                    let n = ta.shape[0];
                    {
                        let da = acc(&mut grads[*a], ta.len());
                        for s in 0..n {
                            for (d, &gv) in da[s * la..(s + 1) * la]
                                .iter_mut()
                                .zip(&g[s * (la + lb)..s * (la + lb) + la])
                            {
                                *d += gv;
                            }
                        }
                    }
                    let db = acc(&mut grads[*b], tb.len());
                    for s in 0..n {
                        for (d, &gv) in db[s * lb..(s + 1) * lb]
                            .iter_mut()
                            .zip(&g[s * (la + lb) + la..(s + 1) * (la + lb)])
                        {
                            *d += gv;
                        }
                    }
                }
                Op::Conv { x, w, b, pad } => {
                    let xt = &self.nodes[*x].value;
                    let d = self.conv_dims(xt, *w, *pad)?;
                    let wt = &self.params[*w].data;
                    let hw = d.ho * d.wo;
                    let k = d.patch();
                    let in_len = xt.item_len();
                    // Per-sample partial weight gradients and input gradients.
                    let parts: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = xt
                        .data
                        .par_chunks(in_len)
                        .zip(g.par_chunks(d.cout * hw))
                        .map(|(xi, gi)| {
                            let mut cols = vec![0.0f32; k * hw];
                            im2col(xi, &d, *pad, &mut cols);
                            let mut dw = vec![0.0f32; d.cout * k];
                            gemm(d.cout, hw, k, gi, (hw, 1), &cols, (1, hw), 0.0, &mut dw);
                            let db: Vec<f32> = gi
                                .chunks(hw)
                                .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32)
                                .collect();
                            let mut dx = vec![0.0f32; in_len];
                            gemm(k, d.cout, hw, wt, (1, k), gi, (hw, 1), 0.0, &mut cols);
                            col2im(&cols, &d, *pad, &mut dx);
                            (dw, db, dx)
                        })
                        .collect();
                    let dst = acc(&mut grads[*x], xt.len());
                    for (s, (dw, db, dx)) in parts.into_iter().enumerate() {
                        for (a, v) in pgrads[*w].iter_mut().zip(dw) {
                            *a += v;
                        }
                        for (a, v) in pgrads[*b].iter_mut().zip(db) {
                            *a += v;
                        }
                        for (a, v) in dst[s * in_len..(s + 1) * in_len].iter_mut().zip(dx) {
                            *a += v;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            params: pgrads,
            nodes: grads,
        })
    }
}

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{col2im, gemm, im2col, Mat, Window};
use super::{AutodiffError, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    Relu { x: Var },
    Clamp { x: Var, lo: f32, hi: f32 },
    Sigmoid { x: Var },
    Ln { x: Var },
    Scale { x: Var, k: f32 },
    Offset { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Concat { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records tensor operations in execution order and replays them backwards.
///
/// A tape is a single-threaded unit of work. Build one per forward pass,
/// call [`Tape::backward`] once on the scalar loss, then read leaf
/// gradients with [`Tape::grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, detail: alloc::string::String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Row-major strides of `b` when broadcast against `out`; 0 on broadcast axes.
fn broadcast_strides(b: Shape, out: Shape) -> [usize; 4] {
    let d = b.dims();
    let natural = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let o = out.dims();
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if d[i] == o[i] { natural[i] } else { 0 };
    }
    s
}

/// Visit `(out_index, b_index)` pairs for `b` broadcast over `out`.
fn for_each_broadcast(out: Shape, b: Shape, mut f: impl FnMut(usize, usize)) {
    if out == b {
        for i in 0..out.len() {
            f(i, i);
        }
        return;
    }
    let st = broadcast_strides(b, out);
    let mut i = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..out.w {
                    f(i, base + w * st[3]);
                    i += 1;
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Record a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Tape::backward) call w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,kh,kw]` plus a
    /// per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(mismatch("conv2d", format!("stride must be positive")));
        }
        if ws.c != xs.c {
            return Err(mismatch("conv2d", format!("input {xs} vs weight {ws} channel count")));
        }
        if ws.h > xs.h + 2 * pad || ws.w > xs.w + 2 * pad || ws.h == 0 || ws.w == 0 {
            return Err(mismatch("conv2d", format!("kernel {ws} larger than padded input {xs}")));
        }
        if let Some(b) = b {
            if self.shape(b).len() != ws.n {
                return Err(mismatch("conv2d", format!("bias {} for {} outputs", self.shape(b), ws.n)));
            }
        }
        let g = Window {
            channels: xs.c,
            in_h: xs.h,
            in_w: xs.w,
            k_h: ws.h,
            k_w: ws.w,
            stride,
            pad,
            out_h: (xs.h + 2 * pad - ws.h) / stride + 1,
            out_w: (xs.w + 2 * pad - ws.w) / stride + 1,
        };
        let out_shape = Shape::new(xs.n, ws.n, g.out_h, g.out_w);
        let mut out = vec![0.0f32; out_shape.len()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.rows() * g.cols()] };
            let out_len = out_shape.sample_len();
            for n in 0..xs.n {
                let xn = &xv[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                let colm = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &g, &mut col);
                    &col[..]
                };
                gemm(
                    ws.n,
                    g.rows(),
                    g.cols(),
                    Mat::rows(wv, g.rows()),
                    Mat::rows(colm, g.cols()),
                    0.0,
                    &mut out[n * out_len..(n + 1) * out_len],
                );
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, out_shape, self.value(b).data());
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.record("conv2d", Tensor::from_raw(out_shape, out), &inputs, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Transposed convolution of `x[N,Cin,H,W]` with `w[Cin,Cout,kh,kw]`;
    /// output spatial size is `(H-1)·stride + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, AutodiffError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(mismatch("conv_transpose2d", format!("stride must be positive")));
        }
        if ws.n != xs.c || ws.h == 0 || ws.w == 0 {
            return Err(mismatch("conv_transpose2d", format!("input {xs} vs weight {ws}")));
        }
        let cout = ws.c;
        if let Some(b) = b {
            if self.shape(b).len() != cout {
                return Err(mismatch("conv_transpose2d", format!("bias {} for {cout} outputs", self.shape(b))));
            }
        }
        let out_shape = Shape::new(xs.n, cout, (xs.h - 1) * stride + ws.h, (xs.w - 1) * stride + ws.w);
        let g = transpose_window(out_shape, ws, stride, xs);
        let mut out = vec![0.0f32; out_shape.len()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut col = vec![0.0f32; g.rows() * g.cols()];
            let row_len = cout * ws.h * ws.w;
            for n in 0..xs.n {
                let xn = &xv[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                gemm(g.rows(), xs.c, g.cols(), Mat::transposed(wv, row_len), Mat::rows(xn, g.cols()), 0.0, &mut col);
                col2im(&col, &g, &mut out[n * out_shape.sample_len()..(n + 1) * out_shape.sample_len()]);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, out_shape, self.value(b).data());
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.record(
            "conv_transpose2d",
            Tensor::from_raw(out_shape, out),
            &inputs,
            Op::ConvTranspose2d { x, w, b, stride },
        )
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(AutodiffError::OddDims { h: s.h, w: s.w });
        }
        let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(os.len());
        let mut argmax = Vec::with_capacity(os.len());
        for nc in 0..s.n * s.c {
            let base = nc * s.plane();
            for i in 0..os.h {
                for j in 0..os.w {
                    let mut best = base + 2 * i * s.w + 2 * j;
                    for idx in [best + 1, best + s.w, best + s.w + 1] {
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.record("maxpool2", Tensor::from_raw(os, out), &[x], Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbor 2× upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(os.len());
        for nc in 0..s.n * s.c {
            for i in 0..os.h {
                let row = &xv[nc * s.plane() + (i / 2) * s.w..nc * s.plane() + (i / 2 + 1) * s.w];
                for j in 0..os.w {
                    out.push(row[j / 2]);
                }
            }
        }
        self.record("upsample_nearest2", Tensor::from_raw(os, out), &[x], Op::Upsample2 { x })
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let out = Tensor::from_raw(v.shape(), v.data().iter().map(|&a| f(a)).collect());
        self.record(name, out, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary("relu", x, |a| a.max(0.0), Op::Relu { x })
    }

    /// Clip to `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var, AutodiffError> {
        assert!(lo <= hi, "clamp bounds out of order");
        self.unary("clamp", x, |a| a.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary("sigmoid", x, |a| 1.0 / (1.0 + crate::math::expf(-a)), Op::Sigmoid { x })
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary("ln", x, crate::math::lnf, Op::Ln { x })
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, k: f32) -> Result<Var, AutodiffError> {
        self.unary("scale", x, |a| a * k, Op::Scale { x, k })
    }

    /// Add a constant.
    pub fn offset(&mut self, x: Var, k: f32) -> Result<Var, AutodiffError> {
        self.unary("offset", x, |a| a + k, Op::Offset { x })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sb.broadcasts_to(&sa) {
            return Err(mismatch(name, format!("{sb} does not broadcast to {sa}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f32; sa.len()];
        for_each_broadcast(sa, sb, |i, j| out[i] = f(av[i], bv[j]));
        self.record(name, Tensor::from_raw(sa, out), &[a, b], op)
    }

    /// `a + b`, with `b` broadcast over `a`'s shape along size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// Channel-wise concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(mismatch("concat_channels", format!("{sa} vs {sb}")));
        }
        let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(os.len());
        for n in 0..sa.n {
            out.extend_from_slice(&av[n * sa.sample_len()..(n + 1) * sa.sample_len()]);
            out.extend_from_slice(&bv[n * sb.sample_len()..(n + 1) * sb.sample_len()]);
        }
        self.record("concat_channels", Tensor::from_raw(os, out), &[a, b], Op::Concat { a, b })
    }

    /// Sum of all elements (accumulated in `f64`).
    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record("sum", Tensor::scalar(s as f32), &[x], Op::Sum { x })
    }

    /// Mean of all elements (accumulated in `f64`).
    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x).data();
        let s: f64 = v.iter().map(|&a| a as f64).sum::<f64>() / v.len().max(1) as f64;
        self.record("mean", Tensor::scalar(s as f32), &[x], Op::Mean { x })
    }

    /// Error unless every element of `v` is finite.
    pub fn check_finite(&self, v: Var) -> Result<(), AutodiffError> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite { op: "check_finite" })
        }
    }

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Afterwards every leaf with `requires_grad` that the loss depends on
    /// has a gradient; leaves reached along several paths receive the sum.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(AutodiffError::NotScalar(ls));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            backprop(&self.nodes, i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }
}

fn add_channel_bias(out: &mut [f32], shape: Shape, bias: &[f32]) {
    let plane = shape.plane();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let start = (n * shape.c + c) * plane;
            out[start..start + plane].iter_mut().for_each(|v| *v += bias[c]);
        }
    }
}

/// The conv window whose output grid is the transposed conv's input grid.
fn transpose_window(out_shape: Shape, ws: Shape, stride: usize, xs: Shape) -> Window {
    Window {
        channels: out_shape.c,
        in_h: out_shape.h,
        in_w: out_shape.w,
        k_h: ws.h,
        k_w: ws.w,
        stride,
        pad: 0,
        out_h: xs.h,
        out_w: xs.w,
    }
}

fn grad_buf<'g>(nodes: &[Node], grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f32]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(node.value.shape()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

fn reduce_bias(g: &Tensor, out: &mut [f32]) {
    let s = g.shape();
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            out[c] += g.data()[start..start + plane].iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
}

fn backprop(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gy = g.data();
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Conv2d { x, w, b, stride, pad } => {
            let (xs, ws) = (val(x).shape(), val(w).shape());
            let os = g.shape();
            let win = Window {
                channels: xs.c,
                in_h: xs.h,
                in_w: xs.w,
                k_h: ws.h,
                k_w: ws.w,
                stride,
                pad,
                out_h: os.h,
                out_w: os.w,
            };
            let (rows, cols) = (win.rows(), win.cols());
            let xv = val(x).data();
            let wv = val(w).data();
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut col = vec![0.0f32; rows * cols];
            let mut dcol = vec![0.0f32; rows * cols];
            let mut dw_acc = if need_w { vec![0.0f32; ws.len()] } else { Vec::new() };
            let mut dx_acc = if need_x { vec![0.0f32; xs.len()] } else { Vec::new() };
            for n in 0..xs.n {
                let gn = &gy[n * os.sample_len()..(n + 1) * os.sample_len()];
                if need_w {
                    let xn = &xv[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                    let colm = if win.is_pointwise() {
                        xn
                    } else {
                        im2col(xn, &win, &mut col);
                        &col[..]
                    };
                    gemm(ws.n, cols, rows, Mat::rows(gn, cols), Mat::transposed(colm, cols), 1.0, &mut dw_acc);
                }
                if need_x {
                    let dxn = &mut dx_acc[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                    if win.is_pointwise() {
                        gemm(rows, ws.n, cols, Mat::transposed(wv, rows), Mat::rows(gn, cols), 1.0, dxn);
                    } else {
                        gemm(rows, ws.n, cols, Mat::transposed(wv, rows), Mat::rows(gn, cols), 0.0, &mut dcol);
                        col2im(&dcol, &win, dxn);
                    }
                }
            }
            if let Some(dw) = grad_buf(nodes, grads, w) {
                dw.iter_mut().zip(&dw_acc).for_each(|(d, a)| *d += a);
            }
            if let Some(dx) = grad_buf(nodes, grads, x) {
                dx.iter_mut().zip(&dx_acc).for_each(|(d, a)| *d += a);
            }
            if let Some(b) = b {
                if let Some(db) = grad_buf(nodes, grads, b) {
                    reduce_bias(g, db);
                }
            }
        }
        &Op::ConvTranspose2d { x, w, b, stride } => {
            let (xs, ws) = (val(x).shape(), val(w).shape());
            let os = g.shape();
            let win = transpose_window(os, ws, stride, xs);
            let (rows, cols) = (win.rows(), win.cols());
            let xv = val(x).data();
            let wv = val(w).data();
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut dcol = vec![0.0f32; rows * cols];
            let mut dw_acc = if need_w { vec![0.0f32; ws.len()] } else { Vec::new() };
            let mut dx_acc = if need_x { vec![0.0f32; xs.len()] } else { Vec::new() };
            for n in 0..xs.n {
                let gn = &gy[n * os.sample_len()..(n + 1) * os.sample_len()];
                im2col(gn, &win, &mut dcol);
                if need_x {
                    let dxn = &mut dx_acc[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                    gemm(xs.c, rows, cols, Mat::rows(wv, rows), Mat::rows(&dcol, cols), 1.0, dxn);
                }
                if need_w {
                    let xn = &xv[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                    gemm(xs.c, cols, rows, Mat::rows(xn, cols), Mat::transposed(&dcol, cols), 1.0, &mut dw_acc);
                }
            }
            if let Some(dw) = grad_buf(nodes, grads, w) {
                dw.iter_mut().zip(&dw_acc).for_each(|(d, a)| *d += a);
            }
            if let Some(dx) = grad_buf(nodes, grads, x) {
                dx.iter_mut().zip(&dx_acc).for_each(|(d, a)| *d += a);
            }
            if let Some(b) = b {
                if let Some(db) = grad_buf(nodes, grads, b) {
                    reduce_bias(g, db);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for (&src, &gv) in argmax.iter().zip(gy) {
                    dx[src as usize] += gv;
                }
            }
        }
        &Op::Upsample2 { x } => {
            let s = val(x).shape();
            if let Some(dx) = grad_buf(nodes, grads, x) {
                let ow = s.w * 2;
                for nc in 0..s.n * s.c {
                    let gbase = nc * 4 * s.plane();
                    for i in 0..s.h * 2 {
                        for j in 0..ow {
                            dx[nc * s.plane() + (i / 2) * s.w + j / 2] += gy[gbase + i * ow + j];
                        }
                    }
                }
            }
        }
        &Op::Relu { x } => {
            let xv = val(x).data();
            if let Some(dx) = grad_buf(nodes, grads, x) {
                for ((d, &a), &gv) in dx.iter_mut().zip(xv).zip(gy) {
                    if a > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        &Op::Clamp { x, lo, hi } => {
            let xv = val(x).data();
            if let Some(dx) = grad_buf(nodes, grads, x) {
                for ((d, &a), &gv) in dx.iter_mut().zip(xv).zip(gy) {
                    if a > lo && a < hi {
                        *d += gv;
                    }
                }
            }
        }
        &Op::Sigmoid { x } => {
            let yv = nodes[i].value.data();
            if let Some(dx) = grad_buf(nodes, grads, x) {
                for ((d, &y), &gv) in dx.iter_mut().zip(yv).zip(gy) {
                    *d += gv * y * (1.0 - y);
                }
            }
        }
        &Op::Ln { x } => {
            let xv = val(x).data();
            if let Some(dx) = grad_buf(nodes, grads, x) {
                for ((d, &a), &gv) in dx.iter_mut().zip(xv).zip(gy) {
                    *d += gv / a;
                }
            }
        }
        &Op::Scale { x, k } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                dx.iter_mut().zip(gy).for_each(|(d, &gv)| *d += gv * k);
            }
        }
        &Op::Offset { x } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                dx.iter_mut().zip(gy).for_each(|(d, &gv)| *d += gv);
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } => {
            let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            let (sa, sb) = (val(a).shape(), val(b).shape());
            if let Some(da) = grad_buf(nodes, grads, a) {
                da.iter_mut().zip(gy).for_each(|(d, &gv)| *d += gv);
            }
            if let Some(db) = grad_buf(nodes, grads, b) {
                accumulate_broadcast(sa, sb, db, |oi| sign * gy[oi] as f64);
            }
        }
        &Op::Mul { a, b } => {
            let (sa, sb) = (val(a).shape(), val(b).shape());
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(da) = grad_buf(nodes, grads, a) {
                for_each_broadcast(sa, sb, |oi, bi| da[oi] += gy[oi] * bv[bi]);
            }
            if let Some(db) = grad_buf(nodes, grads, b) {
                accumulate_broadcast(sa, sb, db, |oi| gy[oi] as f64 * av[oi] as f64);
            }
        }
        &Op::Div { a, b } => {
            let (sa, sb) = (val(a).shape(), val(b).shape());
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(da) = grad_buf(nodes, grads, a) {
                for_each_broadcast(sa, sb, |oi, bi| da[oi] += gy[oi] / bv[bi]);
            }
            if let Some(db) = grad_buf(nodes, grads, b) {
                let mut acc = vec![0.0f64; sb.len()];
                for_each_broadcast(sa, sb, |oi, bi| {
                    let bb = bv[bi] as f64;
                    acc[bi] -= gy[oi] as f64 * av[oi] as f64 / (bb * bb);
                });
                db.iter_mut().zip(acc).for_each(|(d, a)| *d += a as f32);
            }
        }
        &Op::Concat { a, b } => {
            let (sa, sb) = (val(a).shape(), val(b).shape());
            let (la, lb) = (sa.sample_len(), sb.sample_len());
            if let Some(da) = grad_buf(nodes, grads, a) {
                for n in 0..sa.n {
                    let src = &gy[n * (la + lb)..n * (la + lb) + la];
                    da[n * la..(n + 1) * la].iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                }
            }
            if let Some(db) = grad_buf(nodes, grads, b) {
                for n in 0..sa.n {
                    let src = &gy[n * (la + lb) + la..(n + 1) * (la + lb)];
                    db[n * lb..(n + 1) * lb].iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(dx) = grad_buf(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += gy[0]);
            }
        }
        &Op::Mean { x } => {
            let len = val(x).len().max(1);
            if let Some(dx) = grad_buf(nodes, grads, x) {
                let share = (gy[0] as f64 / len as f64) as f32;
                dx.iter_mut().for_each(|d| *d += share);
            }
        }
    }
}

/// `db[j] += Σ_{i ↦ j} term(i)` with the sum taken in `f64`.
fn accumulate_broadcast(sa: Shape, sb: Shape, db: &mut [f32], term: impl Fn(usize) -> f64) {
    if sa == sb {
        db.iter_mut().enumerate().for_each(|(i, d)| *d += term(i) as f32);
        return;
    }
    let mut acc = vec![0.0f64; sb.len()];
    for_each_broadcast(sa, sb, |oi, bi| acc[bi] += term(oi));
    db.iter_mut().zip(acc).for_each(|(d, a)| *d += a as f32);
}

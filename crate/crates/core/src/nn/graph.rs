//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operator records its output value together with a closure that maps
//! the output gradient onto gradients for its parents. Nodes are appended in
//! evaluation order, so a reverse sweep over the tape is a valid topological
//! order for backpropagation.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Train/eval switch for batch normalisation.
pub enum NormMode<'a> {
    /// Normalise with batch statistics.
    Batch,
    /// Normalise with the supplied running mean and variance.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics produced in [`NormMode::Batch`].
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (inputs, labels, statistics).
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn record(&self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar, got {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            // Leaves keep their gradient; interior gradients are dropped once used.
            if node.parents.is_empty() {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("add {:?} + {:?}", va.shape(), vb.shape()));
        }
        let out = va.zip_map(&vb, |x, y| x + y);
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("sub {:?} - {:?}", va.shape(), vb.shape()));
        }
        let out = va.zip_map(&vb, |x, y| x - y);
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("mul {:?} * {:?}", va.shape(), vb.shape()));
        }
        let out = va.zip_map(&vb, |x, y| x * y);
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&vb, |x, y| x * y)),
                    needs[1].then(|| g.zip_map(&va, |x, y| x * y)),
                ]
            }),
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.record(out, &[a], Box::new(move |g, _| vec![Some(g.scale(c))]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.record(
            out,
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(0.0));
        self.record(
            out,
            &[a],
            Box::new(move |g, _| vec![Some(g.zip_map(&va, |gy, x| if x > 0.0 { gy } else { 0.0 }))]),
        )
    }

    /// Gradient reversal: identity forward, gradient multiplied by `-lambda`
    /// on the way back.
    pub fn grl(&self, a: Var, lambda: f64) -> Var {
        let out = (*self.value(a)).clone();
        self.record(
            out,
            &[a],
            Box::new(move |g, _| vec![Some(g.scale(-lambda))]),
        )
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&self, a: Var) -> Var {
        self.constant((*self.value(a)).clone())
    }

    /// `x·wᵀ + b` for `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 2 || vw.ndim() != 2 || vb.ndim() != 1 {
            return shape_err(format!(
                "linear expects 2-D input and weight, got {:?}, {:?}",
                vx.shape(),
                vw.shape()
            ));
        }
        let (n, i) = (vx.shape()[0], vx.shape()[1]);
        let o = vw.shape()[0];
        if vw.shape()[1] != i || vb.shape()[0] != o {
            return shape_err(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            ));
        }
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, vx.data(), false, vw.data(), true, &mut out, false);
        for row in out.chunks_mut(o) {
            for (y, bias) in row.iter_mut().zip(vb.data()) {
                *y += bias;
            }
        }
        let out = Tensor::new(&[n, o], out)?;
        Ok(self.record(
            out,
            &[x, w, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut d = vec![0.0; n * i];
                    gemm(n, o, i, gd, false, vw.data(), false, &mut d, false);
                    Tensor::new(&[n, i], d).expect("shape")
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![0.0; o * i];
                    gemm(o, n, i, gd, true, vx.data(), false, &mut d, false);
                    Tensor::new(&[o, i], d).expect("shape")
                });
                let db = needs[2].then(|| {
                    let mut d = vec![0.0; o];
                    for row in gd.chunks(o) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::new(&[o], d).expect("shape")
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 4 || vw.ndim() != 4 || vb.ndim() != 1 {
            return shape_err(format!(
                "conv2d expects 4-D input and weight, got {:?}, {:?}",
                vx.shape(),
                vw.shape()
            ));
        }
        let xs = vx.shape();
        let ws = vw.shape();
        if ws[1] != xs[1] || vb.shape()[0] != ws[0] || stride == 0 {
            return shape_err(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}",
                xs,
                ws,
                vb.shape()
            ));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return shape_err(format!("conv2d: kernel {:?} larger than input {:?}", ws, xs));
        }
        let n = xs[0];
        let o = ws[0];
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (kr, plane) = (geom.col_rows(), geom.col_cols());
        let in_len = vx.row_len();
        let mut cols = vec![0.0; n * kr * plane];
        let mut out = vec![0.0; n * o * plane];
        for s in 0..n {
            let c = &mut cols[s * kr * plane..(s + 1) * kr * plane];
            im2col(&vx.data()[s * in_len..(s + 1) * in_len], &geom, c);
            let y = &mut out[s * o * plane..(s + 1) * o * plane];
            gemm(o, kr, plane, vw.data(), false, c, false, y, false);
            for (ch, bias) in vb.data().iter().enumerate() {
                for v in &mut y[ch * plane..(ch + 1) * plane] {
                    *v += bias;
                }
            }
        }
        let out = Tensor::new(&[n, o, oh, ow], out)?;
        Ok(self.record(
            out,
            &[x, w, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dx = needs[0].then(|| vec![0.0; n * in_len]);
                let mut dw = needs[1].then(|| vec![0.0; o * kr]);
                let mut db = needs[2].then(|| vec![0.0; o]);
                let mut dcols = vec![0.0; kr * plane];
                for s in 0..n {
                    let gy = &gd[s * o * plane..(s + 1) * o * plane];
                    if let Some(dw) = dw.as_mut() {
                        let c = &cols[s * kr * plane..(s + 1) * kr * plane];
                        gemm(o, plane, kr, gy, false, c, true, dw, true);
                    }
                    if let Some(db) = db.as_mut() {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            *acc += gy[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(kr, o, plane, vw.data(), true, gy, false, &mut dcols, false);
                        col2im(&dcols, &geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                let xs = [n, geom.channels, geom.height, geom.width];
                vec![
                    dx.map(|d| Tensor::new(&xs, d).expect("shape")),
                    dw.map(|d| {
                        Tensor::new(&[o, geom.channels, geom.kernel_h, geom.kernel_w], d)
                            .expect("shape")
                    }),
                    db.map(|d| Tensor::new(&[o], d).expect("shape")),
                ]
            }),
        ))
    }

    /// Batch normalisation over `[N, C, H, W]` with affine `gamma`/`beta`.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vx.ndim() != 4 {
            return shape_err(format!("batch_norm expects 4-D input, got {:?}", vx.shape()));
        }
        let s = vx.shape().to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if vg.shape() != [c] || vb.shape() != [c] {
            return shape_err(format!("batch_norm: {c} channels, gamma {:?}", vg.shape()));
        }
        let count = (n * plane) as f64;
        let (mean, var, batch) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        acc += vx.data()[off..off + plane].iter().sum::<f64>();
                    }
                    mean[ch] = acc / count;
                    let mut sq = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        sq += vx.data()[off..off + plane]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                    var[ch] = sq / count;
                }
                (mean, var, true)
            }
            NormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batch_norm: running stats length".into());
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    let h = (vx.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = vg.data()[ch] * h + vb.data()[ch];
                }
            }
        }
        let stats = batch.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let out = Tensor::new(&s, out)?;
        let var_out = self.record(
            out,
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for k in off..off + plane {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            let gm = vg.data()[ch] * inv_std[ch];
                            for k in off..off + plane {
                                dx[k] = if batch {
                                    gm * (gd[k] - dbeta[ch] / count - xhat[k] * dgamma[ch] / count)
                                } else {
                                    gm * gd[k]
                                };
                            }
                        }
                    }
                    Tensor::new(&s, dx).expect("shape")
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::new(&[c], dgamma.clone()).expect("shape")),
                    needs[2].then(|| Tensor::new(&[c], dbeta.clone()).expect("shape")),
                ]
            }),
        );
        Ok((var_out, stats))
    }

    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 || stride == 0 {
            return shape_err(format!("max_pool2d expects 4-D input, got {:?}", vx.shape()));
        }
        let s = vx.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return shape_err(format!("max_pool2d: kernel {kernel} larger than input {s:?}"));
        }
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![usize::MAX; out.len()];
        for plane in 0..n * c {
            let src = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = src + iy as usize * w + ix as usize;
                            if vx.data()[idx] > best {
                                best = vx.data()[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n * c * h * w];
                for (gv, &i) in g.data().iter().zip(&argmax) {
                    if i != usize::MAX {
                        dx[i] += gv;
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx).expect("shape"))]
            }),
        ))
    }

    /// Mean over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 {
            return shape_err(format!(
                "global_avg_pool expects 4-D input, got {:?}",
                vx.shape()
            ));
        }
        let s = vx.shape().to_vec();
        let plane = s[2] * s[3];
        let out: Vec<f64> = vx
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(&[s[0], s[1]], out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(s.iter().product());
                for gv in g.data() {
                    dx.extend(std::iter::repeat(gv / plane as f64).take(plane));
                }
                vec![Some(Tensor::new(&s, dx).expect("shape"))]
            }),
        ))
    }

    /// Row-wise softmax of a `[N, K]` matrix.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 {
            return shape_err(format!("softmax expects [N, K], got {:?}", vx.shape()));
        }
        let k = vx.shape()[1];
        let mut p = vec![0.0; vx.len()];
        for (row, out) in vx.data().chunks(k).zip(p.chunks_mut(k)) {
            softmax_row(row, out);
        }
        let p = Tensor::new(vx.shape(), p)?;
        let pv = p.clone();
        Ok(self.record(
            p,
            &[x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; pv.len()];
                for ((gr, pr), dr) in g
                    .data()
                    .chunks(k)
                    .zip(pv.data().chunks(k))
                    .zip(dx.chunks_mut(k))
                {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(pv.shape(), dx).expect("shape"))]
            }),
        ))
    }

    /// Batched outer product: `f: [N, D]`, `p: [N, K]` -> `[N, D·K]` with
    /// `h[n, i·K + j] = f[n, i]·p[n, j]`.
    pub fn multilinear(&self, f: Var, p: Var) -> Result<Var> {
        let (vf, vp) = (self.value(f), self.value(p));
        if vf.ndim() != 2 || vp.ndim() != 2 || vf.shape()[0] != vp.shape()[0] {
            return shape_err(format!(
                "multilinear: f {:?}, p {:?}",
                vf.shape(),
                vp.shape()
            ));
        }
        let (n, d, k) = (vf.shape()[0], vf.shape()[1], vp.shape()[1]);
        let mut h = vec![0.0; n * d * k];
        for s in 0..n {
            outer_into(vf.row(s), vp.row(s), &mut h[s * d * k..(s + 1) * d * k]);
        }
        let h = Tensor::new(&[n, d * k], h)?;
        Ok(self.record(
            h,
            &[f, p],
            Box::new(move |g, needs| {
                let gd = g.data();
                let df = needs[0].then(|| {
                    let mut df = vec![0.0; n * d];
                    for s in 0..n {
                        let pr = vp.row(s);
                        for i in 0..d {
                            let base = s * d * k + i * k;
                            df[s * d + i] = (0..k).map(|j| gd[base + j] * pr[j]).sum();
                        }
                    }
                    Tensor::new(&[n, d], df).expect("shape")
                });
                let dp = needs[1].then(|| {
                    let mut dp = vec![0.0; n * k];
                    for s in 0..n {
                        let fr = vf.row(s);
                        for j in 0..k {
                            dp[s * k + j] =
                                (0..d).map(|i| gd[s * d * k + i * k + j] * fr[i]).sum();
                        }
                    }
                    Tensor::new(&[n, k], dp).expect("shape")
                });
                vec![df, dp]
            }),
        ))
    }

    /// Concatenate along dimension 0.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tail = first.shape()[1..].to_vec();
        let mut rows = Vec::with_capacity(values.len());
        let mut data = Vec::new();
        for v in &values {
            if v.ndim() == 0 || v.shape()[1..] != tail[..] {
                return shape_err(format!("concat {:?} with {:?}", first.shape(), v.shape()));
            }
            rows.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows.iter().sum()];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        let row_len: usize = tail.iter().product();
        Ok(self.record(
            out,
            parts,
            Box::new(move |g, needs| {
                let mut off = 0;
                rows.iter()
                    .zip(needs)
                    .map(|(&r, &need)| {
                        let start = off;
                        off += r * row_len;
                        need.then(|| {
                            let mut s = vec![r];
                            s.extend_from_slice(&tail);
                            Tensor::new(&s, g.data()[start..start + r * row_len].to_vec())
                                .expect("shape")
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Rows `start..start + len` along dimension 0.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() == 0 || start + len > vx.shape()[0] {
            return shape_err(format!(
                "slice rows {start}..{} of {:?}",
                start + len,
                vx.shape()
            ));
        }
        let rl = vx.row_len();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, vx.data()[start * rl..(start + len) * rl].to_vec())?;
        let full = vx.shape().to_vec();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&full);
                dx.data_mut()[start * rl..(start + len) * rl].copy_from_slice(g.data());
                vec![Some(dx)]
            }),
        ))
    }

    /// Feature-statistics mixing on `[N, C, H, W]`.
    ///
    /// Each sample `n` is re-styled with `lambdas[n]·(μ, σ)(x_n) +
    /// (1 − lambdas[n])·(μ, σ)(x_{perm[n]})`. Statistics are treated as
    /// constants in the backward pass.
    pub fn mixstyle(&self, x: Var, lambdas: &[f64], perm: &[usize], eps: f64) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 {
            return shape_err(format!("mixstyle expects 4-D input, got {:?}", vx.shape()));
        }
        let s = vx.shape().to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if lambdas.len() != n || perm.len() != n || perm.iter().any(|&p| p >= n) {
            return shape_err(format!(
                "mixstyle: batch {n}, {} lambdas, {} partners",
                lambdas.len(),
                perm.len()
            ));
        }
        let (mu, sig) = instance_stats(vx.data(), n * c, plane, eps);
        let mut scale = vec![0.0; n * c];
        let mut out = vec![0.0; vx.len()];
        for i in 0..n {
            let l = lambdas[i];
            for ch in 0..c {
                let a = i * c + ch;
                let b = perm[i] * c + ch;
                let mu_mix = l * mu[a] + (1.0 - l) * mu[b];
                let sig_mix = l * sig[a] + (1.0 - l) * sig[b];
                scale[a] = sig_mix / sig[a];
                let off = a * plane;
                for k in off..off + plane {
                    out[k] = (vx.data()[k] - mu[a]) * scale[a] + mu_mix;
                }
            }
        }
        let out = Tensor::new(&s, out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut dx = g.clone();
                for (chunk, sc) in dx.data_mut().chunks_mut(plane).zip(&scale) {
                    for v in chunk {
                        *v *= sc;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Weighted mean cross-entropy `Σ w_j ℓ_j / Σ w_j` over `[N, K]` logits.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let vz = self.value(logits);
        if vz.ndim() != 2 || vz.shape()[0] != labels.len() || labels.len() != weights.len() {
            return shape_err(format!(
                "cross_entropy: logits {:?}, {} labels, {} weights",
                vz.shape(),
                labels.len(),
                weights.len()
            ));
        }
        let k = vz.shape()[1];
        if labels.iter().any(|&y| y >= k) {
            return Err(Error::Validation(format!("label out of range for {k} classes")));
        }
        let total_w: f64 = weights.iter().sum();
        if labels.is_empty() || total_w <= 0.0 {
            return Err(Error::Validation("cross_entropy over an empty batch".into()));
        }
        let mut probs = vec![0.0; vz.len()];
        let mut loss = 0.0;
        for (j, (row, p)) in vz.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            softmax_row(row, p);
            loss += weights[j] * (log_sum_exp(row) - row[labels[j]]);
        }
        let out = Tensor::scalar(loss / total_w);
        let labels = labels.to_vec();
        let weights = weights.to_vec();
        let shape = vz.shape().to_vec();
        Ok(self.record(
            out,
            &[logits],
            Box::new(move |g, _| {
                let gl = g.item();
                let mut dz = probs.clone();
                for (j, row) in dz.chunks_mut(k).enumerate() {
                    row[labels[j]] -= 1.0;
                    let c = gl * weights[j] / total_w;
                    for v in row {
                        *v *= c;
                    }
                }
                vec![Some(Tensor::new(&shape, dz).expect("shape"))]
            }),
        ))
    }

    /// Weighted adversarial binary cross-entropy on discriminator logits.
    ///
    /// `−mean_s[w_s·ln D(z_s)] − mean_t[w_t·ln(1 − D(z_t))]` with `D = σ(z)`
    /// clamped to `[clamp, 1 − clamp]`; side "s" is labelled 1 and side "t" 0.
    pub fn domain_bce(
        &self,
        src_logits: Var,
        src_weights: &[f64],
        tgt_logits: Var,
        tgt_weights: &[f64],
        clamp: f64,
    ) -> Result<Var> {
        let (vs, vt) = (self.value(src_logits), self.value(tgt_logits));
        if vs.len() != src_weights.len() || vt.len() != tgt_weights.len() {
            return shape_err(format!(
                "domain_bce: {} / {} logits vs {} / {} weights",
                vs.len(),
                vt.len(),
                src_weights.len(),
                tgt_weights.len()
            ));
        }
        if vs.is_empty() || vt.is_empty() {
            return Err(Error::Validation(
                "domain adversarial loss needs both sides non-empty".into(),
            ));
        }
        let (ns, nt) = (vs.len() as f64, vt.len() as f64);
        let ds: Vec<f64> = vs.data().iter().map(|&z| sigmoid(z)).collect();
        let dt: Vec<f64> = vt.data().iter().map(|&z| sigmoid(z)).collect();
        let lo = clamp;
        let hi = 1.0 - clamp;
        let src_term: f64 = ds
            .iter()
            .zip(src_weights)
            .map(|(d, w)| -w * d.clamp(lo, hi).ln())
            .sum::<f64>()
            / ns;
        let tgt_term: f64 = dt
            .iter()
            .zip(tgt_weights)
            .map(|(d, w)| -w * (1.0 - d.clamp(lo, hi)).ln())
            .sum::<f64>()
            / nt;
        let out = Tensor::scalar(src_term + tgt_term);
        let sw = src_weights.to_vec();
        let tw = tgt_weights.to_vec();
        let (s_shape, t_shape) = (vs.shape().to_vec(), vt.shape().to_vec());
        Ok(self.record(
            out,
            &[src_logits, tgt_logits],
            Box::new(move |g, needs| {
                let gl = g.item();
                let inside = |d: f64| d > lo && d < hi;
                let dsrc = needs[0].then(|| {
                    let d: Vec<f64> = ds
                        .iter()
                        .zip(&sw)
                        .map(|(&d, w)| if inside(d) { -gl * w * (1.0 - d) / ns } else { 0.0 })
                        .collect();
                    Tensor::new(&s_shape, d).expect("shape")
                });
                let dtgt = needs[1].then(|| {
                    let d: Vec<f64> = dt
                        .iter()
                        .zip(&tw)
                        .map(|(&d, w)| if inside(d) { gl * w * d / nt } else { 0.0 })
                        .collect();
                    Tensor::new(&t_shape, d).expect("shape")
                });
                vec![dsrc, dtgt]
            }),
        ))
    }

    /// CORAL distance `‖C_s − C_t‖²_F / (4D²)` between two `[N, D]` batches.
    pub fn coral(&self, src: Var, tgt: Var) -> Result<Var> {
        let (vs, vt) = (self.value(src), self.value(tgt));
        if vs.ndim() != 2 || vt.ndim() != 2 || vs.shape()[1] != vt.shape()[1] {
            return shape_err(format!("coral: {:?} vs {:?}", vs.shape(), vt.shape()));
        }
        if vs.shape()[0] < 2 || vt.shape()[0] < 2 {
            return Err(Error::Validation("coral needs at least 2 samples per side".into()));
        }
        let d = vs.shape()[1];
        let (cs_centered, cs) = covariance(&vs);
        let (ct_centered, ct) = covariance(&vt);
        let diff: Vec<f64> = cs.iter().zip(&ct).map(|(a, b)| a - b).collect();
        let norm = 4.0 * (d * d) as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / norm;
        let (ns, nt) = (vs.shape()[0], vt.shape()[0]);
        Ok(self.record(
            Tensor::scalar(loss),
            &[src, tgt],
            Box::new(move |g, needs| {
                let gl = g.item();
                // dL/dC_s = 2·diff/norm; dL/dX = (2/(n−1))·X_c·dL/dC (centering drops out).
                let dc: Vec<f64> = diff.iter().map(|v| 2.0 * v / norm * gl).collect();
                let grad = |xc: &[f64], n: usize, sign: f64| {
                    let mut out = vec![0.0; n * d];
                    gemm(n, d, d, xc, false, &dc, false, &mut out, false);
                    let c = sign * 2.0 / (n as f64 - 1.0);
                    for v in &mut out {
                        *v *= c;
                    }
                    Tensor::new(&[n, d], out).expect("shape")
                };
                vec![
                    needs[0].then(|| grad(&cs_centered, ns, 1.0)),
                    needs[1].then(|| grad(&ct_centered, nt, -1.0)),
                ]
            }),
        ))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn outer_into(f: &[f64], p: &[f64], out: &mut [f64]) {
    let k = p.len();
    for (i, fi) in f.iter().enumerate() {
        for (j, pj) in p.iter().enumerate() {
            out[i * k + j] = fi * pj;
        }
    }
}

/// Per-plane mean and `sqrt(var + eps)` (population variance).
pub fn instance_stats(data: &[f64], planes: usize, plane: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; planes];
    let mut sig = vec![0.0; planes];
    for (i, p) in data.chunks(plane).take(planes).enumerate() {
        let m = p.iter().sum::<f64>() / plane as f64;
        let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / plane as f64;
        mu[i] = m;
        sig[i] = (v + eps).sqrt();
    }
    (mu, sig)
}

/// Centered rows and unbiased covariance `X_cᵀX_c/(n−1)` of `[N, D]`.
fn covariance(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut xc = x.data().to_vec();
    for row in xc.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = vec![0.0; d * d];
    gemm(d, n, d, &xc, true, &xc, false, &mut cov, false);
    for v in &mut cov {
        *v /= n as f64 - 1.0;
    }
    (xc, cov)
}

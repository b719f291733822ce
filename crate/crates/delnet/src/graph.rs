//! Reverse-mode autodiff over a per-step tape.
//!
//! A `Graph` is built fresh for every forward pass: leaves are copied in
//! from parameter/data tensors, ops append nodes, `backward` walks the
//! tape in reverse. Nothing survives the pass except the gradients the
//! caller copies back into parameter tensors, so there is no cross-step
//! accumulation by construction.
//!
//! The op set is closed and NCHW-only: convolutions (stride 1, `same` or
//! `valid`), instance norm, relu, elementwise arithmetic with scalar
//! broadcast, and the reductions the losses need. Every op checks shapes
//! up front and finiteness of its output, so NaN/Inf surface at the op
//! that produced them instead of three modules later.
//!
//! Nodes fed only by constants are untracked: backward skips them
//! entirely, which is what makes frozen-expert and teacher passes cheap.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatially matches input; zero padding of k/2 on each side.
    Same,
    /// No padding; output shrinks by k-1.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Conv2d { input: Var, kernel: Var, pad: Padding },
    BiasAdd { input: Var, bias: Var },
    InstanceNorm { input: Var, eps: f64 },
    AbsSum(Var),
    SquareSum(Var),
    Sum(Var),
    GlobalAvgPool(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { shape, data, op, tracked, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Finiteness gate: every non-leaf op funnels its output through here.
    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        tracked: bool,
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(shape, data, op, tracked))
    }

    /// Insert a tensor as a leaf; tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Insert a tensor as an untracked constant regardless of its grad flag.
    pub fn frozen_leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("constant", format!("{shape:?} vs {} values", data.len())));
        }
        self.push_checked("constant", shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        debug_assert!(v.is_finite());
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1, "scalar_value on non-scalar");
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("graph node values are finite by construction")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last backward pass w.r.t. `v`, if `v` was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ─── elementwise ────────────────────────────────────────────────────

    /// Shapes must match exactly, or one side must be a single-element
    /// tensor, which broadcasts. No other broadcasting exists.
    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.numel(b) == 1 {
            Ok(sa.to_vec())
        } else if self.numel(a) == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let (va, vb) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let n = shape.iter().product::<usize>();
        let mut out = Vec::with_capacity(n);
        if va.len() == vb.len() {
            out.extend(va.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        } else if vb.len() == 1 {
            let y = vb[0];
            out.extend(va.iter().map(|&x| f(x, y)));
        } else {
            let x = va[0];
            out.extend(vb.iter().map(|&y| f(x, y)));
        }
        let tracked = self.nodes[a.0].tracked || self.nodes[b.0].tracked;
        self.push_checked(name, shape, out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division; a zero divisor surfaces as a non-finite error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| c * x).collect();
        let tracked = self.nodes[a.0].tracked;
        self.push_checked("scale", self.shape(a).to_vec(), data, Op::Scale(a, c), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let tracked = self.nodes[a.0].tracked;
        self.push_checked("add_scalar", self.shape(a).to_vec(), data, Op::AddScalar(a), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let tracked = self.nodes[a.0].tracked;
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), tracked)
    }

    /// Elementwise square root; negative input surfaces as non-finite.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.sqrt()).collect();
        let tracked = self.nodes[a.0].tracked;
        self.push_checked("sqrt", self.shape(a).to_vec(), data, Op::Sqrt(a), tracked)
    }

    // ─── reductions ─────────────────────────────────────────────────────

    pub fn abs_sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().map(|x| x.abs()).sum();
        let tracked = self.nodes[a.0].tracked;
        self.push(vec![1], vec![s], Op::AbsSum(a), tracked)
    }

    pub fn square_sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().map(|x| x * x).sum();
        let tracked = self.nodes[a.0].tracked;
        self.push(vec![1], vec![s], Op::SquareSum(a), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let tracked = self.nodes[a.0].tracked;
        self.push(vec![1], vec![s], Op::Sum(a), tracked)
    }

    /// Mean over the spatial dims: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("want rank 4, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("global_avg_pool", "zero spatial extent"));
        }
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(n * c);
        for nc in 0..n * c {
            let plane = &src[nc * hw..(nc + 1) * hw];
            out.push(plane.iter().sum::<f64>() / hw as f64);
        }
        let tracked = self.nodes[a.0].tracked;
        self.push_checked("global_avg_pool", vec![n, c], out, Op::GlobalAvgPool(a), tracked)
    }

    // ─── structured ops ─────────────────────────────────────────────────

    /// 2-D convolution, stride 1. Input [N,Ci,H,W], kernel [Co,Ci,k,k]
    /// with k odd. `Same` keeps H,W; `Valid` shrinks them by k-1.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: Padding) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("want rank-4 input and kernel, got {ishape:?} and {kshape:?}"),
            ));
        }
        let (n, ci, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (co, kci, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kci} input channels, input has {ci}"),
            ));
        }
        if kh != kw || kh % 2 == 0 || kh == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square odd, got {kh}x{kw}")));
        }
        let p = match pad {
            Padding::Same => kh / 2,
            Padding::Valid => 0,
        };
        let (ho, wo) = match pad {
            Padding::Same => (h, w),
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::shape(
                        "conv2d",
                        format!("valid conv needs input >= kernel, got {h}x{w} vs {kh}x{kw}"),
                    ));
                }
                (h - kh + 1, w - kw + 1)
            }
        };
        if n * ci * h * w == 0 {
            return Err(Error::shape("conv2d", "zero-sized input"));
        }

        let mut out = vec![0.0; n * co * ho * wo];
        {
            let src = &self.nodes[input.0].data;
            let ker = &self.nodes[kernel.0].data;
            conv_forward(src, ker, &mut out, n, ci, h, w, co, kh, p, ho, wo);
        }
        let tracked = self.nodes[input.0].tracked || self.nodes[kernel.0].tracked;
        self.push_checked(
            "conv2d",
            vec![n, co, ho, wo],
            out,
            Op::Conv2d { input, kernel, pad },
            tracked,
        )
    }

    /// Add a per-channel bias [C] to an NCHW tensor.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 || bshape.len() != 1 || bshape[0] != ishape[1] {
            return Err(Error::shape(
                "bias_add",
                format!("input {ishape:?} vs bias {bshape:?}"),
            ));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        {
            let src = &self.nodes[input.0].data;
            let b = &self.nodes[bias.0].data;
            for ni in 0..n {
                for c_i in 0..c {
                    let base = (ni * c + c_i) * hw;
                    let bv = b[c_i];
                    out.extend(src[base..base + hw].iter().map(|&x| x + bv));
                }
            }
        }
        let tracked = self.nodes[input.0].tracked || self.nodes[bias.0].tracked;
        self.push_checked("bias_add", ishape, out, Op::BiasAdd { input, bias }, tracked)
    }

    /// Per-(sample, channel) normalization over the spatial dims with
    /// population variance: (x - mean) / sqrt(var + eps). No affine.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("instance_norm", format!("want rank 4, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("instance_norm", "zero spatial extent"));
        }
        let src = &self.nodes[input.0].data;
        let mut out = Vec::with_capacity(src.len());
        for nc in 0..n * c {
            let plane = &src[nc * hw..(nc + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(plane.iter().map(|&x| (x - mean) * inv));
        }
        let tracked = self.nodes[input.0].tracked;
        self.push_checked("instance_norm", shape, out, Op::InstanceNorm { input, eps }, tracked)
    }

    // ─── backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients land on tracked nodes
    /// and are readable through `grad` until the next backward call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].tracked {
            // Entirely frozen graph: nothing to differentiate.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else { continue };
            let op = self.nodes[id].op.clone();
            self.propagate(id, &g, &op)?;
            self.nodes[id].grad = Some(g);
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let slot = &mut self.nodes[v.0].grad;
        if slot.is_none() {
            *slot = Some(vec![0.0; n]);
        }
        add(slot.as_mut().unwrap());
    }

    /// Add `src` into the grad of `v`, summing to one element if `v` is a
    /// broadcast scalar.
    fn accumulate_bcast(&mut self, v: Var, src: &[f64]) {
        let n = self.nodes[v.0].data.len();
        if n == src.len() {
            self.accumulate(v, |g| {
                for (a, b) in g.iter_mut().zip(src) {
                    *a += b;
                }
            });
        } else {
            debug_assert_eq!(n, 1);
            let total: f64 = src.iter().sum();
            self.accumulate(v, |g| g[0] += total);
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64], op: &Op) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_bcast(a, g);
                self.accumulate_bcast(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate_bcast(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate_bcast(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].tracked {
                    let db = elementwise_with(g, &self.nodes[b.0].data, |gi, bi| gi * bi);
                    self.accumulate_bcast(a, &db);
                }
                if self.nodes[b.0].tracked {
                    let da = elementwise_with(g, &self.nodes[a.0].data, |gi, ai| gi * ai);
                    self.accumulate_bcast(b, &da);
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a.0].tracked {
                    let da = elementwise_with(g, &self.nodes[b.0].data, |gi, bi| gi / bi);
                    self.accumulate_bcast(a, &da);
                }
                if self.nodes[b.0].tracked {
                    // d(a/b)/db = -a / b^2
                    let av = &self.nodes[a.0].data;
                    let bv = &self.nodes[b.0].data;
                    let n = g.len();
                    let mut db = vec![0.0; n];
                    for i in 0..n {
                        let ai = av[if av.len() == 1 { 0 } else { i }];
                        let bi = bv[if bv.len() == 1 { 0 } else { i }];
                        db[i] = -g[i] * ai / (bi * bi);
                    }
                    self.accumulate_bcast(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.accumulate_bcast(a, &da);
            }
            Op::AddScalar(a) => {
                self.accumulate_bcast(a, g);
            }
            Op::Relu(a) => {
                if self.nodes[a.0].tracked {
                    let src = &self.nodes[a.0].data;
                    let da: Vec<f64> =
                        g.iter().zip(src).map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 }).collect();
                    self.accumulate(a, |grad| {
                        for (s, d) in grad.iter_mut().zip(&da) {
                            *s += d;
                        }
                    });
                }
            }
            Op::Sqrt(a) => {
                if self.nodes[a.0].tracked {
                    // d sqrt(x)/dx = 1/(2 sqrt(x)); define 0 at x == 0.
                    let out = &self.nodes[id].data;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .map(|(&gi, &y)| if y == 0.0 { 0.0 } else { gi / (2.0 * y) })
                        .collect();
                    self.accumulate(a, |grad| {
                        for (s, d) in grad.iter_mut().zip(&da) {
                            *s += d;
                        }
                    });
                }
            }
            Op::AbsSum(a) => {
                if self.nodes[a.0].tracked {
                    let gs = g[0];
                    let src = &self.nodes[a.0].data;
                    let da: Vec<f64> = src.iter().map(|&x| gs * sign(x)).collect();
                    self.accumulate(a, |grad| {
                        for (s, d) in grad.iter_mut().zip(&da) {
                            *s += d;
                        }
                    });
                }
            }
            Op::SquareSum(a) => {
                if self.nodes[a.0].tracked {
                    let gs = g[0];
                    let src = &self.nodes[a.0].data;
                    let da: Vec<f64> = src.iter().map(|&x| 2.0 * gs * x).collect();
                    self.accumulate(a, |grad| {
                        for (s, d) in grad.iter_mut().zip(&da) {
                            *s += d;
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.nodes[a.0].tracked {
                    let gs = g[0];
                    self.accumulate(a, |grad| {
                        for s in grad.iter_mut() {
                            *s += gs;
                        }
                    });
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.nodes[a.0].tracked {
                    let shape = &self.nodes[a.0].shape;
                    let hw = shape[2] * shape[3];
                    let inv = 1.0 / hw as f64;
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for (nc, &gv) in g.iter().enumerate() {
                        let base = nc * hw;
                        for slot in &mut da[base..base + hw] {
                            *slot = gv * inv;
                        }
                    }
                    self.accumulate(a, |grad| {
                        for (s, d) in grad.iter_mut().zip(&da) {
                            *s += d;
                        }
                    });
                }
            }
            Op::Conv2d { input, kernel, pad } => {
                let ishape = self.nodes[input.0].shape.clone();
                let kshape = self.nodes[kernel.0].shape.clone();
                let (n, ci, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (co, kh) = (kshape[0], kshape[2]);
                let p = match pad {
                    Padding::Same => kh / 2,
                    Padding::Valid => 0,
                };
                let (ho, wo) = (self.nodes[id].shape[2], self.nodes[id].shape[3]);
                if self.nodes[input.0].tracked {
                    let mut din = vec![0.0; self.nodes[input.0].data.len()];
                    conv_backward_input(
                        g,
                        &self.nodes[kernel.0].data,
                        &mut din,
                        n,
                        ci,
                        h,
                        w,
                        co,
                        kh,
                        p,
                        ho,
                        wo,
                    );
                    self.accumulate(input, |grad| {
                        for (s, d) in grad.iter_mut().zip(&din) {
                            *s += d;
                        }
                    });
                }
                if self.nodes[kernel.0].tracked {
                    let mut dker = vec![0.0; self.nodes[kernel.0].data.len()];
                    conv_backward_kernel(
                        g,
                        &self.nodes[input.0].data,
                        &mut dker,
                        n,
                        ci,
                        h,
                        w,
                        co,
                        kh,
                        p,
                        ho,
                        wo,
                    );
                    self.accumulate(kernel, |grad| {
                        for (s, d) in grad.iter_mut().zip(&dker) {
                            *s += d;
                        }
                    });
                }
            }
            Op::BiasAdd { input, bias } => {
                if self.nodes[input.0].tracked {
                    self.accumulate(input, |grad| {
                        for (s, d) in grad.iter_mut().zip(g) {
                            *s += d;
                        }
                    });
                }
                if self.nodes[bias.0].tracked {
                    let shape = &self.nodes[input.0].shape;
                    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for (c_i, slot) in db.iter_mut().enumerate() {
                            let base = (ni * c + c_i) * hw;
                            *slot += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(bias, |grad| {
                        for (s, d) in grad.iter_mut().zip(&db) {
                            *s += d;
                        }
                    });
                }
            }
            Op::InstanceNorm { input, eps } => {
                if self.nodes[input.0].tracked {
                    let shape = &self.nodes[input.0].shape;
                    let hw = shape[2] * shape[3];
                    let m = hw as f64;
                    let src = &self.nodes[input.0].data;
                    let xhat = &self.nodes[id].data;
                    let mut din = vec![0.0; src.len()];
                    for nc in 0..shape[0] * shape[1] {
                        let lo = nc * hw;
                        let hi = lo + hw;
                        let plane = &src[lo..hi];
                        let mean = plane.iter().sum::<f64>() / m;
                        let var =
                            plane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / m;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gp = &g[lo..hi];
                        let yp = &xhat[lo..hi];
                        let g_mean = gp.iter().sum::<f64>() / m;
                        let gy_mean =
                            gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<f64>() / m;
                        for i in 0..hw {
                            din[lo + i] = inv * (gp[i] - g_mean - yp[i] * gy_mean);
                        }
                    }
                    self.accumulate(input, |grad| {
                        for (s, d) in grad.iter_mut().zip(&din) {
                            *s += d;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Apply f(g_i, other_i) respecting the scalar-broadcast rule.
fn elementwise_with(g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if other.len() == 1 {
        let o = other[0];
        g.iter().map(|&gi| f(gi, o)).collect()
    } else {
        g.iter().zip(other).map(|(&gi, &oi)| f(gi, oi)).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    src: &[f64],
    ker: &[f64],
    out: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    p: usize,
    ho: usize,
    wo: usize,
) {
    for ni in 0..n {
        for o in 0..co {
            let out_base = (ni * co + o) * ho * wo;
            for i in 0..ci {
                let in_base = (ni * ci + i) * h * w;
                let k_base = (o * ci + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ker[k_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // x + kx - p must fall in [0, w)
                        let x_lo = p.saturating_sub(kx);
                        let x_hi = (w + p - kx).min(wo);
                        for y in 0..ho {
                            let iy = y + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let in_row = in_base + (iy - p) * w;
                            let out_row = out_base + y * wo;
                            for x in x_lo..x_hi {
                                out[out_row + x] += wv * src[in_row + x + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input(
    g: &[f64],
    ker: &[f64],
    din: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    p: usize,
    ho: usize,
    wo: usize,
) {
    for ni in 0..n {
        for o in 0..co {
            let out_base = (ni * co + o) * ho * wo;
            for i in 0..ci {
                let in_base = (ni * ci + i) * h * w;
                let k_base = (o * ci + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ker[k_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let x_lo = p.saturating_sub(kx);
                        let x_hi = (w + p - kx).min(wo);
                        for y in 0..ho {
                            let iy = y + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let in_row = in_base + (iy - p) * w;
                            let out_row = out_base + y * wo;
                            for x in x_lo..x_hi {
                                din[in_row + x + kx - p] += wv * g[out_row + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_kernel(
    g: &[f64],
    src: &[f64],
    dker: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    p: usize,
    ho: usize,
    wo: usize,
) {
    for ni in 0..n {
        for o in 0..co {
            let out_base = (ni * co + o) * ho * wo;
            for i in 0..ci {
                let in_base = (ni * ci + i) * h * w;
                let k_base = (o * ci + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let x_lo = p.saturating_sub(kx);
                        let x_hi = (w + p - kx).min(wo);
                        let mut acc = 0.0;
                        for y in 0..ho {
                            let iy = y + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let in_row = in_base + (iy - p) * w;
                            let out_row = out_base + y * wo;
                            for x in x_lo..x_hi {
                                acc += g[out_row + x] * src[in_row + x + kx - p];
                            }
                        }
                        dker[k_base + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_scalar_fn;
    use crate::rng::CounterRng;

    fn rand_tensor(shape: &[usize], rng: &mut CounterRng, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.range(lo, hi)).collect();
        Tensor::param(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_1x1_doubling_kernel() {
        let mut g = Graph::new();
        let x = g
            .constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let k = g.constant(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = g.conv2d(x, k, Padding::Same).unwrap();
        assert_eq!(g.value(y), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_3x3_same_box_filter_edge_weights() {
        // Constant 1.0 image, 3x3 kernel of 1/9: interior stays 1.0, a
        // corner only sees 4 taps -> 4/9.
        let mut g = Graph::new();
        let x = g.constant(vec![1, 1, 4, 4], vec![1.0; 16]).unwrap();
        let k = g.constant(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        let y = g.conv2d(x, k, Padding::Same).unwrap();
        let v = g.value(y);
        assert!((v[0] - 4.0 / 9.0).abs() < 1e-12, "corner {}", v[0]);
        assert!((v[5] - 1.0).abs() < 1e-12, "interior {}", v[5]);
        assert!((v[1] - 6.0 / 9.0).abs() < 1e-12, "edge {}", v[1]);
    }

    #[test]
    fn conv_valid_shrinks_output() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 1, 5, 6], vec![1.0; 30]).unwrap();
        let k = g.constant(vec![2, 1, 3, 3], vec![0.5; 18]).unwrap();
        let y = g.conv2d(x, k, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 4]);
        // Every window sums 9 taps of 1.0 times 0.5.
        assert!(g.value(y).iter().all(|v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3, 4, 4], vec![0.0; 48]).unwrap();
        let k_bad_ci = g.constant(vec![2, 2, 3, 3], vec![0.0; 36]).unwrap();
        assert!(g.conv2d(x, k_bad_ci, Padding::Same).is_err());
        let k_even = g.constant(vec![2, 3, 2, 2], vec![0.0; 24]).unwrap();
        assert!(g.conv2d(x, k_even, Padding::Same).is_err());
    }

    #[test]
    fn instance_norm_constant_plane_goes_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 1, 2, 3], vec![5.0; 6]).unwrap();
        let y = g.instance_norm(x, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_two_point_plane() {
        // Values {1, 3}: mean 2, population var 1 -> roughly (-1, 1),
        // slightly shrunk by eps.
        let mut g = Graph::new();
        let x = g.constant(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = g.instance_norm(x, 1e-5).unwrap();
        let v = g.value(y);
        assert!((v[0] + 1.0).abs() < 1e-4);
        assert!((v[1] - 1.0).abs() < 1e-4);
        assert!(v[1] < 1.0, "eps smoothing must shrink below 1");
    }

    #[test]
    fn relu_and_abs_sum_values() {
        let mut g = Graph::new();
        let x = g.constant(vec![4], vec![-1.5, 0.0, 2.0, -3.0]).unwrap();
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0, 0.0]);
        let s = g.abs_sum(x);
        assert_eq!(g.scalar_value(s), 6.5);
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = g.scalar(10.0);
        let y = g.add(x, c).unwrap();
        assert_eq!(g.value(y), &[11.0, 12.0, 13.0]);
        let z = g.mul(c, x).unwrap();
        assert_eq!(g.value(z), &[10.0, 20.0, 30.0]);
        let w = g.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(g.add(x, w).is_err(), "mismatched non-scalar shapes must fail");
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut g = Graph::new();
        let a = g.scalar(1.0);
        let b = g.scalar(0.0);
        assert!(matches!(g.div(a, b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sqrt_of_negative_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(vec![1], vec![-1.0]).unwrap();
        assert!(matches!(g.sqrt(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn forward_is_deterministic_bit_for_bit() {
        let mut rng = CounterRng::keyed(11, &[0]);
        let x = rand_tensor(&[2, 3, 5, 5], &mut rng, -1.0, 1.0);
        let k = rand_tensor(&[4, 3, 3, 3], &mut rng, -0.5, 0.5);
        let run = || {
            let mut g = Graph::new();
            let xv = g.frozen_leaf(&x);
            let kv = g.frozen_leaf(&k);
            let c = g.conv2d(xv, kv, Padding::Same).unwrap();
            let n = g.instance_norm(c, 1e-5).unwrap();
            let r = g.relu(n);
            g.value(r).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn untracked_graph_backward_is_a_no_op() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let s = g.abs_sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn simple_chain_backward_hand_check() {
        // f = sum(relu(x) * 3): df/dx_i = 3 where x_i > 0 else 0.
        let t = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let r = g.relu(x);
        let s = g.scale(r, 3.0).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 0.0, 3.0]);
    }

    // ─── finite-difference checks, one per differentiable op ───────────

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = CounterRng::keyed(21, &[1]);
        let a = rand_tensor(&[6], &mut rng, 0.25, 1.5);
        let b = rand_tensor(&[6], &mut rng, 0.25, 1.5);
        let rep = check_scalar_fn(&[a, b], |g, vs| {
            let s = g.sub(vs[0], vs[1])?;
            let m = g.mul(s, vs[0])?;
            let d = g.div(m, vs[1])?;
            let sc = g.scale(d, 0.7)?;
            let sh = g.add_scalar(sc, 0.1)?;
            Ok(g.abs_sum(sh))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_conv2d_both_paddings() {
        let mut rng = CounterRng::keyed(22, &[2]);
        for pad in [Padding::Same, Padding::Valid] {
            let x = rand_tensor(&[1, 2, 5, 5], &mut rng, -1.0, 1.0);
            let k = rand_tensor(&[3, 2, 3, 3], &mut rng, -0.6, 0.6);
            let rep = check_scalar_fn(&[x, k], move |g, vs| {
                let c = g.conv2d(vs[0], vs[1], pad)?;
                Ok(g.abs_sum(c))
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-6, "{pad:?} rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn grad_bias_add_and_pool() {
        let mut rng = CounterRng::keyed(23, &[3]);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
        let rep = check_scalar_fn(&[x, b], |g, vs| {
            let y = g.bias_add(vs[0], vs[1])?;
            let p = g.global_avg_pool(y)?;
            Ok(g.square_sum(p))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_instance_norm() {
        let mut rng = CounterRng::keyed(24, &[4]);
        let x = rand_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
        let rep = check_scalar_fn(&[x], |g, vs| {
            let y = g.instance_norm(vs[0], 1e-5)?;
            let r = g.relu(y);
            Ok(g.abs_sum(r))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_sqrt_and_square_sum() {
        let mut rng = CounterRng::keyed(25, &[5]);
        let x = rand_tensor(&[5], &mut rng, 0.5, 2.0);
        let rep = check_scalar_fn(&[x], |g, vs| {
            let q = g.square_sum(vs[0]);
            let s = g.sqrt(q)?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn second_backward_resets_gradients() {
        let t = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let s = g.square_sum(x);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first[..], "no cross-pass accumulation");
    }
}

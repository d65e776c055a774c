//! A small reverse-mode autodiff tape specialised to the ops the model needs.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation.

use std::rc::Rc;

use crate::tensor::{batched_gemm, Float, MatLayout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Which key positions each query row may attend to (`true` = allowed).
///
/// Stored as `[batch / groups, tq, tk]`; attention batch `b` uses mask slab
/// `b / groups`, which lets all heads of a sequence share one mask.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub groups: usize,
    pub tq: usize,
    pub tk: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn causal(n: usize, t: usize, groups: usize) -> Self {
        let mut allowed = Vec::with_capacity(n * t * t);
        for _ in 0..n {
            for i in 0..t {
                allowed.extend((0..t).map(|j| j <= i));
            }
        }
        Self {
            groups,
            tq: t,
            tk: t,
            allowed,
        }
    }

    /// Each slab's keys are allowed per `key_ok[slab * tk + j]`, for every query row.
    pub fn from_keys(key_ok: &[bool], tq: usize, tk: usize, groups: usize) -> Self {
        let n = key_ok.len() / tk;
        let mut allowed = Vec::with_capacity(n * tq * tk);
        for s in 0..n {
            for _ in 0..tq {
                allowed.extend_from_slice(&key_ok[s * tk..(s + 1) * tk]);
            }
        }
        Self {
            groups,
            tq,
            tk,
            allowed,
        }
    }

    fn row(&self, batch: usize, q: usize) -> &[bool] {
        let slab = batch / self.groups;
        let start = (slab * self.tq + q) * self.tk;
        &self.allowed[start..start + self.tk]
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        la: MatLayout,
        lb: MatLayout,
        a_shared: bool,
        b_shared: bool,
    },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: F },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu { x: Var },
    Softmax { x: Var },
    Reshape { x: Var },
    Swap12 { x: Var, dims: [usize; 4] },
    Rope { x: Var, table: Rc<RopeTable<F>> },
    Gather { x: Var, row_len: usize, idx: Rc<Vec<Option<usize>>> },
    CrossEntropy { logits: Var, targets: Rc<Vec<usize>>, weights: Rc<Vec<F>>, probs: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Cos/sin tables for rotary position embedding over `t` positions of head dim `dh`.
pub struct RopeTable<F> {
    pub t: usize,
    pub dh: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Float> RopeTable<F> {
    pub fn new(positions: &[usize], dh: usize, base: f64) -> Self {
        assert!(dh % 2 == 0, "rotary embedding needs an even head dimension");
        let half = dh / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / dh as f64);
                cos.push(F::from_f64c(theta.cos()));
                sin.push(F::from_f64c(theta.sin()));
            }
        }
        Self {
            t: positions.len(),
            dh,
            cos,
            sin,
        }
    }

    /// Rotate rows of `[n, t, dh]` in place; `inverse` applies the transpose rotation.
    pub fn apply(&self, x: &mut [F], inverse: bool) {
        let half = self.dh / 2;
        for (r, row) in x.chunks_exact_mut(self.dh).enumerate() {
            let pos = r % self.t;
            for i in 0..half {
                let c = self.cos[pos * half + i];
                let s = if inverse {
                    -self.sin[pos * half + i]
                } else {
                    self.sin[pos * half + i]
                };
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts<F: Float>(x: F) -> (F, F) {
    // tanh approximation; returns (value, derivative)
    let c = F::from_f64c((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64c(0.044715);
    let half = F::from_f64c(0.5);
    let one = F::one();
    let three = F::from_f64c(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let v = half * x * (one + t);
    let du = c * (one + three * k * x * x);
    let dv = half * (one + t) + half * x * (one - t * t) * du;
    (v, dv)
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// `x[..., k] · w[k, n]` with `w` shared across all leading dimensions.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "weight must be 2-D");
        let k = *xs.last().unwrap();
        assert_eq!(k, ws[0], "linear: {xs:?} x {ws:?}");
        let rows = xs.iter().product::<usize>() / k;
        let y = self.matmul_raw(
            x,
            w,
            1,
            MatLayout { rows, cols: k, transposed: false },
            true,
            MatLayout { rows: ws[0], cols: ws[1], transposed: false },
            true,
            {
                let mut s = xs.clone();
                *s.last_mut().unwrap() = ws[1];
                s
            },
        );
        match bias {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Batched `a[b] · b[b]` (or `a[b] · b[b]ᵀ` when `transpose_b`) over 3-D operands.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm batch: {sa:?} vs {sb:?}");
        let n = if transpose_b { sb[1] } else { sb[2] };
        self.matmul_raw(
            a,
            b,
            sa[0],
            MatLayout { rows: sa[1], cols: sa[2], transposed: false },
            false,
            MatLayout { rows: sb[1], cols: sb[2], transposed: transpose_b },
            false,
            vec![sa[0], sa[1], n],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_raw(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        la: MatLayout,
        a_shared: bool,
        lb: MatLayout,
        b_shared: bool,
        out_shape: Vec<usize>,
    ) -> Var {
        let mut out = Tensor::zeros(out_shape);
        batched_gemm(
            batch,
            &self.value(a).data,
            la,
            a_shared,
            &self.value(b).data,
            lb,
            b_shared,
            &mut out.data,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                batch,
                la,
                lb,
                a_shared,
                b_shared,
            },
            ng,
        )
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(b).numel();
        assert_eq!(self.value(x).last_dim(), n);
        let mut out = self.value(x).clone();
        let bias = &self.value(b).data;
        for row in out.data.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBias { x, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel(), "add: size mismatch");
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data.iter_mut().zip(&self.value(b).data) {
            *o += bv;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, s }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.numel() / d;
        let eps = F::from_f64c(LN_EPS);
        let inv_d = F::from_f64c(1.0 / d as f64);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let gv = &self.value(g).data;
        let bv = &self.value(b).data;
        let mut out = Tensor::zeros(xv.shape.clone());
        for (orow, hrow) in out.data.chunks_exact_mut(d).zip(xhat.chunks_exact(d)) {
            for j in 0..d {
                orow[j] = hrow[j] * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(g) || self.ng(b);
        self.push(out, Op::LayerNorm { x, g, b, xhat, rstd }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu_parts(*v).0);
        let ng = self.ng(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// Softmax over the last dimension of `[batch, tq, tk]`; rows with no allowed key become zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<AttnMask>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape.len(), 3);
        let (batch, tq, tk) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        assert_eq!((mask.tq, mask.tk), (tq, tk), "mask shape");
        assert_eq!(mask.allowed.len() * mask.groups, batch * tq * tk, "mask batch");
        let mut out = Tensor::zeros(xv.shape.clone());
        for bi in 0..batch {
            for q in 0..tq {
                let allow = mask.row(bi, q);
                let off = (bi * tq + q) * tk;
                let xr = &xv.data[off..off + tk];
                let mut mx = F::neg_infinity();
                for (j, &v) in xr.iter().enumerate() {
                    if allow[j] && v > mx {
                        mx = v;
                    }
                }
                if mx == F::neg_infinity() {
                    continue;
                }
                let orow = &mut out.data[off..off + tk];
                let mut sum = F::zero();
                for j in 0..tk {
                    if allow[j] {
                        let e = (xr[j] - mx).exp();
                        orow[j] = e;
                        sum += e;
                    }
                }
                let inv = F::one() / sum;
                orow.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(shape.iter().product::<usize>(), out.numel(), "reshape {:?} -> {shape:?}", out.shape);
        out.shape = shape;
        let ng = self.ng(x);
        self.push(out, Op::Reshape { x }, ng)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap12(&mut self, x: Var, dims: [usize; 4]) -> Var {
        let xv = self.value(x);
        assert_eq!(dims.iter().product::<usize>(), xv.numel());
        let out = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], swap12_data(&xv.data, dims));
        let ng = self.ng(x);
        self.push(out, Op::Swap12 { x, dims }, ng)
    }

    /// Rotary position embedding over rows of `[n, t, dh]`.
    pub fn rope(&mut self, x: Var, table: Rc<RopeTable<F>>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.last_dim(), table.dh);
        table.apply(&mut out.data, false);
        let ng = self.ng(x);
        self.push(out, Op::Rope { x, table }, ng)
    }

    /// Rows of `x` (viewed as `[_, row_len]`) picked by `idx`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, row_len: usize, idx: Rc<Vec<Option<usize>>>, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), idx.len() * row_len);
        let mut data = vec![F::zero(); idx.len() * row_len];
        for (dst, src) in data.chunks_exact_mut(row_len).zip(idx.iter()) {
            if let Some(r) = src {
                dst.copy_from_slice(&xv.data[r * row_len..(r + 1) * row_len]);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::Gather { x, row_len, idx }, ng)
    }

    /// Weighted mean token cross-entropy of `logits [n, vocab]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>, weights: Rc<Vec<F>>) -> Var {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let n = lv.numel() / v;
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let mut probs = vec![F::zero(); lv.numel()];
        let mut total = F::zero();
        let mut wsum = F::zero();
        for r in 0..n {
            let row = &lv.data[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let pr = &mut probs[r * v..(r + 1) * v];
            let mut s = F::zero();
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - mx).exp();
                s += *p;
            }
            let inv = F::one() / s;
            pr.iter_mut().for_each(|p| *p *= inv);
            let nll = -(row[targets[r]] - mx - s.ln());
            total += weights[r] * nll;
            wsum += weights[r];
        }
        let loss = if wsum > F::zero() { total / wsum } else { F::zero() };
        let ng = self.ng(logits);
        self.push(
            Tensor::new(vec![1], vec![loss]),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            ng,
        )
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                la,
                lb,
                a_shared,
                b_shared,
            } => {
                let (m, _k) = logical(*la);
                let (_, n) = logical(*lb);
                let gl = MatLayout { rows: m, cols: n, transposed: false };
                let flip = |l: MatLayout| MatLayout { transposed: !l.transposed, ..l };
                if self.ng(*a) {
                    // dA = dC · op(B)ᵀ, accumulated directly in A's storage layout
                    let bdata = &self.value(*b).data;
                    let ga = self.acc(grads, *a).unwrap();
                    if la.transposed {
                        // A stored as op(A)ᵀ: dAstored = op(B) · dCᵀ
                        matmul_into(*batch, bdata, *lb, *b_shared, g, flip(gl), false, ga, *a_shared);
                    } else {
                        matmul_into(*batch, g, gl, false, bdata, flip(*lb), *b_shared, ga, *a_shared);
                    }
                }
                if self.ng(*b) {
                    let adata = &self.value(*a).data;
                    let gb = self.acc(grads, *b).unwrap();
                    if lb.transposed {
                        // B stored as op(B)ᵀ [n,k]: dBstored = dCᵀ · op(A)
                        matmul_into(*batch, g, flip(gl), false, adata, *la, *a_shared, gb, *b_shared);
                    } else {
                        matmul_into(*batch, adata, flip(*la), *a_shared, g, gl, false, gb, *b_shared);
                    }
                }
            }
            Op::AddBias { x, b } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::LayerNorm { x, g: gain, b, xhat, rstd } => {
                let d = self.value(*gain).numel();
                let gv = &self.value(*gain).data;
                if let Some(gg) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for grow in g.chunks_exact(d) {
                        gb.iter_mut().zip(grow).for_each(|(a, &s)| *a += s);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_d = F::from_f64c(1.0 / d as f64);
                    for (r, ((gxr, grow), hrow)) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * hrow[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            gxr[j] += rstd[r] * (dxh - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = &self.value(*x).data;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &s), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * gelu_parts(xi).1;
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let tk = y.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gxr, grow), yrow) in gx
                        .chunks_exact_mut(tk)
                        .zip(g.chunks_exact(tk))
                        .zip(y.data.chunks_exact(tk))
                    {
                        let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..tk {
                            gxr[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Swap12 { x, dims } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let back = swap12_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                    gx.iter_mut().zip(back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Rope { x, table } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let mut back = g.to_vec();
                    table.apply(&mut back, true);
                    gx.iter_mut().zip(back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Gather { x, row_len, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (src, dst) in g.chunks_exact(*row_len).zip(idx.iter()) {
                        if let Some(r) = dst {
                            gx[r * row_len..(r + 1) * row_len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let wsum: F = weights.iter().copied().sum();
                if wsum <= F::zero() {
                    return;
                }
                let scale = g[0] / wsum;
                let v = self.value(*logits).last_dim();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, (glr, pr)) in gl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).enumerate() {
                        let w = weights[r] * scale;
                        if w == F::zero() {
                            continue;
                        }
                        for j in 0..v {
                            glr[j] += w * pr[j];
                        }
                        glr[targets[r]] -= w;
                    }
                }
            }
        }
    }
}

fn logical(l: MatLayout) -> (usize, usize) {
    if l.transposed {
        (l.cols, l.rows)
    } else {
        (l.rows, l.cols)
    }
}

/// `dst (+)= op(x)·op(y)` where the product has `rows x cols` per batch, summing
/// over batches when `dst` is shared.
#[allow(clippy::too_many_arguments)]
fn matmul_into<F: Float>(
    batch: usize,
    x: &[F],
    lx: MatLayout,
    x_shared: bool,
    y: &[F],
    ly: MatLayout,
    y_shared: bool,
    dst: &mut [F],
    dst_shared: bool,
) {
    if !dst_shared || batch == 1 {
        batched_gemm(batch, x, lx, x_shared, y, ly, y_shared, dst, true);
        return;
    }
    // shared destination: reduce over batches in order
    let xs = lx.rows * lx.cols;
    let ys = ly.rows * ly.cols;
    for bi in 0..batch {
        let xo = if x_shared { 0 } else { bi * xs };
        let yo = if y_shared { 0 } else { bi * ys };
        batched_gemm(1, &x[xo..xo + xs], lx, true, &y[yo..yo + ys], ly, true, dst, true);
    }
}

fn swap12_data<F: Float>(x: &[F], [a, b, c, d]: [usize; 4]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Per-node gradients from [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads[v.0].take()
    }
}

//! Reverse-mode tape. Each op records its inputs and whatever it needs for
//! the adjoint; `backward` walks the tape once in reverse.

use super::kernels::{self, ConvDims, Tap};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A loss evaluated independently on each row of a `[frames, pixels]` input.
pub trait FrameLoss<T: Real> {
    fn forward(&self, frame: usize, p: &[T]) -> T;
    /// Accumulates `grad_out * d loss / d p` into `dp`.
    fn backward(&self, frame: usize, p: &[T], grad_out: T, dp: &mut [T]);
}

enum Op<T: Real> {
    Constant,
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddBroadcast { x: Var, y: Var, index: Vec<usize> },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<Vec<T>> },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    Resize { x: Var, planes: usize, src: (usize, usize), dst: (usize, usize), taps_h: Vec<Tap>, taps_w: Vec<Tap> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, widths: Vec<usize> },
    GatherRows { table: Var, rows: Vec<usize> },
    Sum(Var),
    FrameLoss { p: Var, loss: Box<dyn FrameLoss<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bad(what: &str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::shape(what, expected, got)
}

/// Maps each flat index of `x_shape` to the flat index of a tensor of
/// `y_shape` broadcast against it (numpy rules, trailing alignment).
fn broadcast_index(x_shape: &[usize], y_shape: &[usize]) -> Result<Vec<usize>> {
    if y_shape.len() > x_shape.len() {
        return Err(bad("broadcast operand", x_shape, y_shape));
    }
    let offset = x_shape.len() - y_shape.len();
    let mut y_strides = vec![0usize; x_shape.len()];
    let mut stride = 1;
    for (i, &d) in y_shape.iter().enumerate().rev() {
        let xd = x_shape[i + offset];
        if d != xd && d != 1 {
            return Err(bad("broadcast operand", x_shape, y_shape));
        }
        y_strides[i + offset] = if d == 1 { 0 } else { stride };
        stride *= d;
    }
    let n: usize = x_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; x_shape.len()];
    for _ in 0..n {
        out.push(idx.iter().zip(&y_strides).map(|(i, s)| i * s).sum());
        for ax in (0..x_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < x_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(out)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable input; its gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, t: Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let shape = self.shape(*v).to_vec();
                let g = self
                    .grad(*v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
                (name.clone(), Tensor::new(shape, g).expect("grad shape"))
            })
            .collect()
    }

    // ---- ops -------------------------------------------------------------

    /// `x[..., K] @ w[K, N] + b[N]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(bad("linear weight", xs.last().copied(), &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(bad("linear bias", [n], self.shape(b)));
            }
        }
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(bad("add operand", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// `x + y` with `y` broadcast to the shape of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let index = broadcast_index(self.shape(x), self.shape(y))?;
        let yd = self.value(y).data();
        let data = self.value(x).data().iter().zip(&index).map(|(&a, &i)| a + yd[i]).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(t, Op::AddBroadcast { x, y, index }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(bad("mul operand", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * s).collect()).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).unwrap();
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim().max(1);
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Normalizes the trailing axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(bad("layer_norm affine", [d], self.shape(gamma)));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Multi-head scaled dot-product attention over `[tokens, width]`
    /// inputs. Tokens attend only within their own segment `(start, len)`;
    /// segments must tile the token axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[(usize, usize)]) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(bad("attention q/k/v", &qs, self.shape(k)));
        }
        let (tokens, width) = (qs[0], qs[1]);
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
        }
        let mut cursor = 0;
        for &(s, l) in segments {
            if s != cursor {
                return Err(bad("attention segments", cursor, s));
            }
            cursor += l;
        }
        if cursor != tokens {
            return Err(bad("attention segments", tokens, cursor));
        }
        let hd = width / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); tokens * width];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let qh = gather_head(qd, start, len, width, h, hd);
                let kh = gather_head(kd, start, len, width, h, hd);
                let vh = gather_head(vd, start, len, width, h, hd);
                let mut p = vec![T::zero(); len * len];
                kernels::matmul_nt_acc(&qh, &kh, &mut p, len, hd, len);
                for row in p.chunks_exact_mut(len.max(1)) {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(row);
                }
                let mut oh = vec![T::zero(); len * hd];
                kernels::matmul_acc(&p, &vh, &mut oh, len, len, hd);
                scatter_head(&oh, &mut out, start, len, width, h, hd);
                probs.push(p);
            }
        }
        let t = Tensor::new(qs, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention { q, k, v, heads, segments: segments.to_vec(), probs },
            ng,
        ))
    }

    /// Same-padded stride-1 convolution, `x: [B, Cin, H, W]`,
    /// `w: [Cout, Cin, kh, kw]` with odd kernel extents.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2].is_multiple_of(2) || ws[3].is_multiple_of(2) {
            return Err(bad("conv2d input/weight", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(bad("conv2d bias", [ws[0]], self.shape(b)));
            }
        }
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            height: xs[2],
            width: xs[3],
            k_h: ws[2],
            k_w: ws[3],
        };
        let mut out = vec![T::zero(); dims.batch * dims.c_out * dims.height * dims.width];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
            dims,
        );
        let t = Tensor::new(vec![dims.batch, dims.c_out, dims.height, dims.width], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, dims }, ng))
    }

    /// Bilinear resize of the two trailing axes (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || out_h == 0 || out_w == 0 || xs[xs.len() - 1] == 0 || xs[xs.len() - 2] == 0 {
            return Err(bad("resize input", "[.., H>0, W>0]", &xs));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = xs[..xs.len() - 2].iter().product::<usize>();
        let taps_h = kernels::resize_taps(h, out_h);
        let taps_w = kernels::resize_taps(w, out_w);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, ty) in taps_h.iter().enumerate() {
                let (wy0, wy1) = (T::of(ty.w0), T::of(ty.w1));
                for (ox, tx) in taps_w.iter().enumerate() {
                    let (wx0, wx1) = (T::of(tx.w0), T::of(tx.w1));
                    dst[oy * out_w + ox] = wy0 * (wx0 * src[ty.i0 * w + tx.i0] + wx1 * src[ty.i0 * w + tx.i1])
                        + wy1 * (wx0 * src[ty.i1 * w + tx.i0] + wx1 * src[ty.i1 * w + tx.i1]);
                }
            }
        }
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Resize { x, planes, src: (h, w), dst: (out_h, out_w), taps_h, taps_w },
            ng,
        ))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(bad("permutation", xs.len(), perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let src_index = permute_index(&xs, perm);
        let xd = self.value(x).data();
        let data = src_index.iter().map(|&i| xd[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(bad("concat operand", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), widths }, ng))
    }

    /// Selects rows of a `[R, D]` table, giving `[rows.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || rows.iter().any(|&r| r >= ts[0]) {
            return Err(bad("gather rows", &ts, rows));
        }
        let d = ts[1];
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&td[r * d..(r + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(Tensor::new(vec![rows.len(), d], out)?, Op::GatherRows { table, rows: rows.to_vec() }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Applies a per-frame loss to `p: [frames, ...]`, giving `[frames]`.
    pub fn frame_loss(&mut self, p: Var, loss: Box<dyn FrameLoss<T>>) -> Result<Var> {
        let ps = self.shape(p);
        if ps.is_empty() {
            return Err(bad("frame loss input", "[frames, ...]", ps));
        }
        let frames = ps[0];
        let per = self.value(p).numel() / frames.max(1);
        let pd = self.value(p).data();
        let out: Vec<T> = (0..frames).map(|f| loss.forward(f, &pd[f * per..(f + 1) * per])).collect();
        let ng = self.ng(p);
        Ok(self.push(Tensor::new(vec![frames], out)?, Op::FrameLoss { p, loss }, ng))
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates from a single-element output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(bad("backward seed", 1, self.value(out).numel()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=out.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn gather_head<T: Real>(src: &[T], start: usize, len: usize, width: usize, h: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(len * hd);
    for t in start..start + len {
        out.extend_from_slice(&src[t * width + h * hd..t * width + (h + 1) * hd]);
    }
    out
}

fn scatter_head<T: Real>(src: &[T], dst: &mut [T], start: usize, len: usize, width: usize, h: usize, hd: usize) {
    for (i, t) in (start..start + len).enumerate() {
        for (d, s) in dst[t * width + h * hd..t * width + (h + 1) * hd].iter_mut().zip(&src[i * hd..(i + 1) * hd]) {
            *d += *s;
        }
    }
}

/// For each output flat index, the input flat index it reads.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut res = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        res.push(cur);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            cur += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    res
}

fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Constant | Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let ws = nodes[w.0].value.shape();
            let (k, n) = (ws[0], ws[1]);
            let m = g.len() / n.max(1);
            if let Some(dx) = slot(nodes, grads, *x) {
                kernels::matmul_nt_acc(g, val(*w), dx, m, n, k);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                kernels::matmul_tn_acc(val(*x), g, dw, m, k, n);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(n.max(1)) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(nodes, grads, *v) {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::AddBroadcast { x, y, index } => {
            if let Some(d) = slot(nodes, grads, *x) {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            if let Some(d) = slot(nodes, grads, *y) {
                for (&j, &gv) in index.iter().zip(g) {
                    d[j] += gv;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dv, &gv), &o) in d.iter_mut().zip(g).zip(bv) {
                    *dv += gv * o;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((dv, &gv), &o) in d.iter_mut().zip(g).zip(av) {
                    *dv += gv * o;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += gv * *s;
                }
            }
        }
        Op::Relu(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dv, &gv), &o) in d.iter_mut().zip(g).zip(out) {
                    if o > T::zero() {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dv, &gv), &o) in d.iter_mut().zip(g).zip(out) {
                    *dv += gv * o * (T::one() - o);
                }
            }
        }
        Op::Softmax(a) => {
            let dim = nodes[i].value.last_dim().max(1);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((drow, grow), yrow) in d.chunks_exact_mut(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact(dim)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                    for ((dv, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += y * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let dim = nodes[x.0].value.last_dim();
            let gm = val(*gamma);
            if let Some(db) = slot(nodes, grads, *beta) {
                for row in g.chunks_exact(dim) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (row, xr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                    for ((d, &gv), &xh) in dg.iter_mut().zip(row).zip(xr) {
                        *d += gv * xh;
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let dn = T::of(dim as f64);
                for (r, ((drow, grow), xr)) in dx
                    .chunks_exact_mut(dim)
                    .zip(g.chunks_exact(dim))
                    .zip(xhat.chunks_exact(dim))
                    .enumerate()
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..dim {
                        let dxh = grow[j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                    }
                    let (m1, m2) = (s1 / dn, s2 / dn);
                    for j in 0..dim {
                        let dxh = grow[j] * gm[j];
                        drow[j] += rstd[r] * (dxh - m1 - xr[j] * m2);
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, segments, probs } => {
            let width = nodes[q.0].value.shape()[1];
            let hd = width / heads;
            let scale = T::one() / T::of(hd as f64).sqrt();
            let mut dq = nodes[q.0].needs_grad.then(|| vec![T::zero(); g.len()]);
            let mut dk = nodes[k.0].needs_grad.then(|| vec![T::zero(); g.len()]);
            let mut dv = nodes[v.0].needs_grad.then(|| vec![T::zero(); g.len()]);
            let mut pi = 0;
            for &(start, len) in segments {
                for h in 0..*heads {
                    let p = &probs[pi];
                    pi += 1;
                    let go = gather_head(g, start, len, width, h, hd);
                    let vh = gather_head(val(*v), start, len, width, h, hd);
                    if let Some(dv) = dv.as_mut() {
                        let mut d = vec![T::zero(); len * hd];
                        kernels::matmul_tn_acc(p, &go, &mut d, len, len, hd);
                        scatter_head(&d, dv, start, len, width, h, hd);
                    }
                    if dq.is_none() && dk.is_none() {
                        continue;
                    }
                    let mut ds = vec![T::zero(); len * len];
                    kernels::matmul_nt_acc(&go, &vh, &mut ds, len, hd, len);
                    for (srow, prow) in ds.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                        let dot: T = srow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (s, &pv) in srow.iter_mut().zip(prow) {
                            *s = pv * (*s - dot) * scale;
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        let kh = gather_head(val(*k), start, len, width, h, hd);
                        let mut d = vec![T::zero(); len * hd];
                        kernels::matmul_acc(&ds, &kh, &mut d, len, len, hd);
                        scatter_head(&d, dq, start, len, width, h, hd);
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qh = gather_head(val(*q), start, len, width, h, hd);
                        let mut d = vec![T::zero(); len * hd];
                        kernels::matmul_tn_acc(&ds, &qh, &mut d, len, len, hd);
                        scatter_head(&d, dk, start, len, width, h, hd);
                    }
                }
            }
            for (var, local) in [(q, dq), (k, dk), (v, dv)] {
                if let (Some(local), Some(d)) = (local, slot(nodes, grads, *var)) {
                    for (a, b) in d.iter_mut().zip(local) {
                        *a += b;
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, dims } => {
            let xv = val(*x);
            let wv = val(*w);
            let mut dx = nodes[x.0].needs_grad.then(|| vec![T::zero(); xv.len()]);
            let mut dw = nodes[w.0].needs_grad.then(|| vec![T::zero(); wv.len()]);
            let mut db = b.filter(|b| nodes[b.0].needs_grad).map(|_| vec![T::zero(); dims.c_out]);
            kernels::conv2d_backward(xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut(), *dims);
            let targets = [(Some(*x), dx), (Some(*w), dw), (*b, db)];
            for (var, local) in targets {
                if let (Some(var), Some(local)) = (var, local) {
                    if let Some(d) = slot(nodes, grads, var) {
                        for (a, b) in d.iter_mut().zip(local) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Op::Resize { x, planes, src, dst, taps_h, taps_w } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let (h, w) = *src;
                let (oh, ow) = *dst;
                for p in 0..*planes {
                    let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dd = &mut d[p * h * w..(p + 1) * h * w];
                    for (oy, ty) in taps_h.iter().enumerate() {
                        let (wy0, wy1) = (T::of(ty.w0), T::of(ty.w1));
                        for (ox, tx) in taps_w.iter().enumerate() {
                            let (wx0, wx1) = (T::of(tx.w0), T::of(tx.w1));
                            let gv = gsrc[oy * ow + ox];
                            dd[ty.i0 * w + tx.i0] += gv * wy0 * wx0;
                            dd[ty.i0 * w + tx.i1] += gv * wy0 * wx1;
                            dd[ty.i1 * w + tx.i0] += gv * wy1 * wx0;
                            dd[ty.i1 * w + tx.i1] += gv * wy1 * wx1;
                        }
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let idx = permute_index(nodes[x.0].value.shape(), perm);
                for (&j, &gv) in idx.iter().zip(g) {
                    d[j] += gv;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
        }
        Op::Concat { inputs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total.max(1);
            let mut off = 0;
            for (&v, &w) in inputs.iter().zip(widths) {
                if let Some(d) = slot(nodes, grads, v) {
                    for r in 0..rows {
                        for (dv, &gv) in d[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + off..r * total + off + w]) {
                            *dv += gv;
                        }
                    }
                }
                off += w;
            }
        }
        Op::GatherRows { table, rows } => {
            let d_w = nodes[table.0].value.shape()[1];
            if let Some(d) = slot(nodes, grads, *table) {
                for (i, &r) in rows.iter().enumerate() {
                    for (dv, &gv) in d[r * d_w..(r + 1) * d_w].iter_mut().zip(&g[i * d_w..(i + 1) * d_w]) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for dv in d.iter_mut() {
                    *dv += g[0];
                }
            }
        }
        Op::FrameLoss { p, loss } => {
            let frames = g.len();
            let pv = val(*p);
            let per = pv.len() / frames.max(1);
            if let Some(d) = slot(nodes, grads, *p) {
                for f in 0..frames {
                    loss.backward(f, &pv[f * per..(f + 1) * per], g[f], &mut d[f * per..(f + 1) * per]);
                }
            }
        }
    }
}

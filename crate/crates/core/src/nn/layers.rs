use super::scalar::Scalar;
use super::spec::{Attention, LayerSpec};
use crate::error::{Error, Result};

/// A weight matrix (`out` x `fan_in`) with bias, optionally weight-normalised.
/// Parameter layout at `offset`: direction (or raw weights), gains if
/// normalised, then bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightBlock {
    pub offset: usize,
    pub out: usize,
    pub fan_in: usize,
    pub weight_norm: bool,
}

impl WeightBlock {
    pub fn n_params(&self) -> usize {
        self.out * self.fan_in + self.out + if self.weight_norm { self.out } else { 0 }
    }

    pub fn weights_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.out * self.fan_in
    }

    pub fn gain_range(&self) -> Option<std::ops::Range<usize>> {
        self.weight_norm.then(|| {
            let s = self.offset + self.out * self.fan_in;
            s..s + self.out
        })
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.n_params() - self.out;
        s..s + self.out
    }
}

/// Effective weights of one block for the current parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Eff {
    pub w: Vec<f64>,
    /// Row-major `fan_in` x `out` copy for dense layers.
    pub wt: Vec<f64>,
    pub b: Vec<f64>,
    pub inv_norm: Vec<f64>,
}

pub(crate) fn materialize(block: &WeightBlock, params: &[f64], transpose: bool) -> Eff {
    let (out, fan_in) = (block.out, block.fan_in);
    let raw = &params[block.weights_range()];
    let mut w = raw.to_vec();
    let mut inv_norm = Vec::new();
    if let Some(gr) = block.gain_range() {
        let g = &params[gr];
        inv_norm = (0..out)
            .map(|o| {
                let n = raw[o * fan_in..(o + 1) * fan_in]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            })
            .collect();
        for o in 0..out {
            let s = g[o] * inv_norm[o];
            for v in &mut w[o * fan_in..(o + 1) * fan_in] {
                *v *= s;
            }
        }
    }
    let wt = if transpose {
        let mut t = vec![0.0; out * fan_in];
        for o in 0..out {
            for i in 0..fan_in {
                t[i * out + o] = w[o * fan_in + i];
            }
        }
        t
    } else {
        Vec::new()
    };
    Eff {
        w,
        wt,
        b: params[block.bias_range()].to_vec(),
        inv_norm,
    }
}

/// Gradients with respect to the effective weights and biases of a block.
#[derive(Debug, Clone)]
pub(crate) struct BlockGrad<S> {
    pub w: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> BlockGrad<S> {
    pub fn zeros(block: &WeightBlock) -> Self {
        Self {
            w: vec![S::zero(); block.out * block.fan_in],
            b: vec![S::zero(); block.out],
        }
    }
}

/// Chains effective-weight gradients through the weight-norm
/// reparametrisation and writes them into the flat gradient vector.
pub(crate) fn scatter_grad<S: Scalar>(
    block: &WeightBlock,
    params: &[f64],
    eff: &Eff,
    grad: &BlockGrad<S>,
    out: &mut [S],
) {
    let (rows, fan_in) = (block.out, block.fan_in);
    let wr = block.weights_range();
    match block.gain_range() {
        None => out[wr].copy_from_slice(&grad.w),
        Some(gr) => {
            let v = &params[wr.clone()];
            let g = &params[gr.clone()];
            for o in 0..rows {
                let row = o * fan_in..(o + 1) * fan_in;
                let inv = eff.inv_norm[o];
                let mut dg = S::zero();
                for (gw, vv) in grad.w[row.clone()].iter().zip(&v[row.clone()]) {
                    dg += gw.scale(vv * inv);
                }
                out[gr.start + o] = dg;
                let s = g[o] * inv;
                for j in row {
                    out[wr.start + j] = (grad.w[j] - dg.scale(v[j] * inv)).scale(s);
                }
            }
        }
    }
    out[block.bias_range()].copy_from_slice(&grad.b);
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Dense {
        block: usize,
    },
    Conv {
        block: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        h: usize,
        w: usize,
    },
    Residual {
        body: Vec<Node>,
        shortcut: Option<Box<Node>>,
    },
    NonLocal {
        blocks: [usize; 4],
        c: usize,
        inner: usize,
        n: usize,
        attention: Attention,
    },
    Reshape,
    Tanh,
    Softmax,
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub name: String,
    pub op: Op,
    pub in_size: usize,
    pub out_size: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn compile(
    specs: &[LayerSpec],
    in_shape: &[usize],
    prefix: &str,
    blocks: &mut Vec<WeightBlock>,
    offset: &mut usize,
) -> Result<(Vec<Node>, Vec<usize>)> {
    let mut shape = in_shape.to_vec();
    let mut nodes = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("{prefix}{i} ({})", kind_name(spec));
        let node = compile_one(spec, &shape, &name, blocks, offset)?;
        shape = node.out_shape.clone();
        nodes.push(node);
    }
    Ok((nodes, shape))
}

fn kind_name(spec: &LayerSpec) -> &'static str {
    match spec {
        LayerSpec::Dense { .. } => "dense",
        LayerSpec::Conv2d { .. } => "conv2d",
        LayerSpec::Residual { .. } => "residual",
        LayerSpec::NonLocal { .. } => "non-local",
        LayerSpec::Reshape { .. } => "reshape",
        LayerSpec::Tanh => "tanh",
        LayerSpec::Softmax => "softmax",
        LayerSpec::LinearLogit => "linear-logit",
    }
}

fn push_block(
    blocks: &mut Vec<WeightBlock>,
    offset: &mut usize,
    out: usize,
    fan_in: usize,
    weight_norm: bool,
) -> usize {
    let b = WeightBlock {
        offset: *offset,
        out,
        fan_in,
        weight_norm,
    };
    *offset += b.n_params();
    blocks.push(b);
    blocks.len() - 1
}

fn chw(shape: &[usize], name: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::ShapeChain {
            layer: name.to_string(),
            detail: format!("expects a [C, H, W] input, got {shape:?}"),
        }),
    }
}

fn compile_one(
    spec: &LayerSpec,
    shape: &[usize],
    name: &str,
    blocks: &mut Vec<WeightBlock>,
    offset: &mut usize,
) -> Result<Node> {
    let in_size: usize = shape.iter().product();
    if in_size == 0 {
        return Err(Error::ShapeChain {
            layer: name.to_string(),
            detail: format!("empty input shape {shape:?}"),
        });
    }
    let zero = |what: &str| Error::ShapeChain {
        layer: name.to_string(),
        detail: format!("{what} must be positive"),
    };
    let (op, out_shape) = match spec {
        LayerSpec::Dense { out, weight_norm } => {
            if *out == 0 {
                return Err(zero("output width"));
            }
            let block = push_block(blocks, offset, *out, in_size, *weight_norm);
            (Op::Dense { block }, vec![*out])
        }
        LayerSpec::LinearLogit => {
            let block = push_block(blocks, offset, 1, in_size, false);
            (Op::Dense { block }, vec![1])
        }
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            weight_norm,
        } => {
            let (c, h, w) = chw(shape, name)?;
            if *out_channels == 0 {
                return Err(zero("output channel count"));
            }
            if *kernel == 0 {
                return Err(zero("kernel size"));
            }
            let block = push_block(blocks, offset, *out_channels, c * kernel * kernel, *weight_norm);
            (
                Op::Conv {
                    block,
                    c_in: c,
                    c_out: *out_channels,
                    k: *kernel,
                    h,
                    w,
                },
                vec![*out_channels, h, w],
            )
        }
        LayerSpec::Residual { body, weight_norm } => {
            if body.is_empty() {
                return Err(Error::ShapeChain {
                    layer: name.to_string(),
                    detail: "empty residual body".into(),
                });
            }
            let (nodes, body_out) = compile(body, shape, &format!("{name}.body."), blocks, offset)?;
            let shortcut = if body_out == shape {
                None
            } else {
                let (_, h, w) = chw(shape, name)?;
                match body_out.as_slice() {
                    [c2, h2, w2] if *h2 == h && *w2 == w => Some(Box::new(compile_one(
                        &LayerSpec::Conv2d {
                            out_channels: *c2,
                            kernel: 1,
                            weight_norm: *weight_norm,
                        },
                        shape,
                        &format!("{name}.shortcut (conv2d)"),
                        blocks,
                        offset,
                    )?)),
                    _ => {
                        return Err(Error::ShapeChain {
                            layer: name.to_string(),
                            detail: format!(
                                "body maps {shape:?} to {body_out:?}; only the channel count may change"
                            ),
                        })
                    }
                }
            };
            (
                Op::Residual {
                    body: nodes,
                    shortcut,
                },
                body_out,
            )
        }
        LayerSpec::NonLocal {
            inner,
            attention,
            weight_norm,
        } => {
            let (c, h, w) = chw(shape, name)?;
            if *inner == 0 {
                return Err(zero("inner width"));
            }
            let q = push_block(blocks, offset, *inner, c, *weight_norm);
            let k = push_block(blocks, offset, *inner, c, *weight_norm);
            let v = push_block(blocks, offset, *inner, c, *weight_norm);
            let o = push_block(blocks, offset, c, *inner, *weight_norm);
            (
                Op::NonLocal {
                    blocks: [q, k, v, o],
                    c,
                    inner: *inner,
                    n: h * w,
                    attention: *attention,
                },
                shape.to_vec(),
            )
        }
        LayerSpec::Reshape { shape: to } => {
            if to.iter().product::<usize>() != in_size {
                return Err(Error::ShapeChain {
                    layer: name.to_string(),
                    detail: format!("cannot reshape {shape:?} to {to:?}"),
                });
            }
            (Op::Reshape, to.clone())
        }
        LayerSpec::Tanh => (Op::Tanh, shape.to_vec()),
        LayerSpec::Softmax => (Op::Softmax, shape.to_vec()),
    };
    Ok(Node {
        name: name.to_string(),
        op,
        in_size,
        out_size: out_shape.iter().product(),
        out_shape,
    })
}

/// Per-layer state kept by the forward pass.
#[derive(Debug, Clone)]
pub(crate) enum Aux<S> {
    None,
    Residual {
        acts: Vec<Vec<S>>,
        aux: Vec<Aux<S>>,
    },
    NonLocal {
        q: Vec<S>,
        k: Vec<S>,
        v: Vec<S>,
        attn: Vec<S>,
        y: Vec<S>,
    },
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy_f64<S: Scalar>(y: &mut [S], a: f64, x: &[S]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += xx.scale(a);
    }
}

#[inline]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += *xx * a;
    }
}

#[inline]
fn axpy_wt<S: Scalar>(y: &mut [S], a: S, w: &[f64]) {
    for (yy, ww) in y.iter_mut().zip(w) {
        *yy += a.scale(*ww);
    }
}

fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, cols: &mut [S]) {
    let p = h * w;
    let pad = (k as isize - 1) / 2;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let q = (ci * k + ky) * k + kx;
                let row = &mut cols[q * p..(q + 1) * p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &x[ci * p + sy as usize * w..ci * p + (sy as usize + 1) * w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - pad;
                        *d = if sx >= 0 && sx < w as isize {
                            src[sx as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize, gx: &mut [S]) {
    let p = h * w;
    let pad = (k as isize - 1) / 2;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let q = (ci * k + ky) * k + kx;
                let row = &cols[q * p..(q + 1) * p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * p + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            gx[base + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

// 1x1 projection of a [C, N] map: out[o, :] = b[o] + sum_c w[o, c] x[c, :].
fn project<S: Scalar>(eff: &Eff, x: &[S], c: usize, n: usize, rows: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * n];
    for o in 0..rows {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(S::cst(eff.b[o]));
        for ci in 0..c {
            let wv = eff.w[o * c + ci];
            if wv != 0.0 {
                axpy_f64(dst, wv, &x[ci * n..(ci + 1) * n]);
            }
        }
    }
    out
}

fn project_backward<S: Scalar>(
    eff: &Eff,
    x: &[S],
    gout: &[S],
    c: usize,
    n: usize,
    rows: usize,
    grad: &mut BlockGrad<S>,
    gx: &mut [S],
) {
    for o in 0..rows {
        let go = &gout[o * n..(o + 1) * n];
        let mut gb = S::zero();
        for v in go {
            gb += *v;
        }
        grad.b[o] += gb;
        for ci in 0..c {
            grad.w[o * c + ci] += dot(go, &x[ci * n..(ci + 1) * n]);
            let wv = eff.w[o * c + ci];
            if wv != 0.0 {
                axpy_f64(&mut gx[ci * n..(ci + 1) * n], wv, go);
            }
        }
    }
}

pub(crate) fn forward_nodes<S: Scalar>(
    nodes: &[Node],
    effs: &[Eff],
    x: Vec<S>,
    batch: usize,
) -> (Vec<Vec<S>>, Vec<Aux<S>>) {
    let mut acts = Vec::with_capacity(nodes.len() + 1);
    let mut auxs = Vec::with_capacity(nodes.len());
    acts.push(x);
    for node in nodes {
        let (y, aux) = forward_node(node, effs, acts.last().expect("input present"), batch);
        acts.push(y);
        auxs.push(aux);
    }
    (acts, auxs)
}

fn forward_node<S: Scalar>(node: &Node, effs: &[Eff], x: &[S], batch: usize) -> (Vec<S>, Aux<S>) {
    let (ni, no) = (node.in_size, node.out_size);
    match &node.op {
        Op::Dense { block } => {
            let e = &effs[*block];
            let mut out = vec![S::zero(); batch * no];
            for s in 0..batch {
                let dst = &mut out[s * no..(s + 1) * no];
                for (d, b) in dst.iter_mut().zip(&e.b) {
                    *d = S::cst(*b);
                }
                for (i, xv) in x[s * ni..(s + 1) * ni].iter().enumerate() {
                    axpy_wt(dst, *xv, &e.wt[i * no..(i + 1) * no]);
                }
            }
            (out, Aux::None)
        }
        Op::Conv {
            block,
            c_in,
            c_out,
            k,
            h,
            w,
        } => {
            let e = &effs[*block];
            let p = h * w;
            let q = c_in * k * k;
            let mut cols = vec![S::zero(); q * p];
            let mut out = vec![S::zero(); batch * no];
            for s in 0..batch {
                let xs = &x[s * ni..(s + 1) * ni];
                let src: &[S] = if *k == 1 {
                    xs
                } else {
                    im2col(xs, *c_in, *h, *w, *k, &mut cols);
                    &cols
                };
                let os = &mut out[s * no..(s + 1) * no];
                for co in 0..*c_out {
                    let dst = &mut os[co * p..(co + 1) * p];
                    dst.fill(S::cst(e.b[co]));
                    for qq in 0..q {
                        let wv = e.w[co * q + qq];
                        if wv != 0.0 {
                            axpy_f64(dst, wv, &src[qq * p..(qq + 1) * p]);
                        }
                    }
                }
            }
            (out, Aux::None)
        }
        Op::Residual { body, shortcut } => {
            let (acts, aux) = forward_nodes(body, effs, x.to_vec(), batch);
            let mut out = acts.last().expect("non-empty body").clone();
            match shortcut {
                None => {
                    for (o, xv) in out.iter_mut().zip(x) {
                        *o += *xv;
                    }
                }
                Some(sc) => {
                    let (sy, _) = forward_node(sc, effs, x, batch);
                    for (o, v) in out.iter_mut().zip(&sy) {
                        *o += *v;
                    }
                }
            }
            (out, Aux::Residual { acts, aux })
        }
        Op::NonLocal {
            blocks,
            c,
            inner,
            n,
            attention,
        } => {
            let (c, m, n) = (*c, *inner, *n);
            let mut out = x.to_vec();
            let mut qs = Vec::with_capacity(batch * m * n);
            let mut ks = Vec::with_capacity(batch * m * n);
            let mut vs = Vec::with_capacity(batch * m * n);
            let mut attns = Vec::with_capacity(batch * n * n);
            let mut ys = Vec::with_capacity(batch * m * n);
            for s in 0..batch {
                let xs = &x[s * ni..(s + 1) * ni];
                let q = project(&effs[blocks[0]], xs, c, n, m);
                let kk = project(&effs[blocks[1]], xs, c, n, m);
                let v = project(&effs[blocks[2]], xs, c, n, m);
                let attn = attention_weights(&q, &kk, m, n, *attention);
                // y[:, i] = sum_j attn[i, j] v[:, j]
                let mut y = vec![S::zero(); m * n];
                for r in 0..m {
                    let vr = &v[r * n..(r + 1) * n];
                    for i in 0..n {
                        y[r * n + i] = dot(&attn[i * n..(i + 1) * n], vr);
                    }
                }
                let proj = project(&effs[blocks[3]], &y, m, n, c);
                for (o, pv) in out[s * ni..(s + 1) * ni].iter_mut().zip(&proj) {
                    *o += *pv;
                }
                qs.extend(q);
                ks.extend(kk);
                vs.extend(v);
                attns.extend(attn);
                ys.extend(y);
            }
            (
                out,
                Aux::NonLocal {
                    q: qs,
                    k: ks,
                    v: vs,
                    attn: attns,
                    y: ys,
                },
            )
        }
        Op::Reshape => (x.to_vec(), Aux::None),
        Op::Tanh => (x.iter().map(|v| v.tanh()).collect(), Aux::None),
        Op::Softmax => {
            let mut out = vec![S::zero(); batch * no];
            for s in 0..batch {
                softmax_into(&x[s * ni..(s + 1) * ni], &mut out[s * no..(s + 1) * no]);
            }
            (out, Aux::None)
        }
    }
}

fn softmax_into<S: Scalar>(x: &[S], out: &mut [S]) {
    let mx = x.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let mut total = S::zero();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (*v - S::cst(mx)).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn attention_weights<S: Scalar>(q: &[S], k: &[S], m: usize, n: usize, mode: Attention) -> Vec<S> {
    match mode {
        Attention::Uniform => vec![S::cst(1.0 / n as f64); n * n],
        Attention::Softmax => {
            let mut scores = vec![S::zero(); n * n];
            for r in 0..m {
                let kr = &k[r * n..(r + 1) * n];
                for i in 0..n {
                    axpy(&mut scores[i * n..(i + 1) * n], q[r * n + i], kr);
                }
            }
            let mut attn = vec![S::zero(); n * n];
            for i in 0..n {
                softmax_into(&scores[i * n..(i + 1) * n], &mut attn[i * n..(i + 1) * n]);
            }
            attn
        }
    }
}

/// Reverse pass over `nodes[..upto]` given the gradient with respect to
/// `acts[upto]`. Returns the gradient with respect to `acts[0]`.
pub(crate) fn backward_nodes<S: Scalar>(
    nodes: &[Node],
    effs: &[Eff],
    acts: &[Vec<S>],
    auxs: &[Aux<S>],
    upto: usize,
    upstream: Vec<S>,
    batch: usize,
    grads: &mut [BlockGrad<S>],
) -> Vec<S> {
    let mut g = upstream;
    for i in (0..upto).rev() {
        g = backward_node(&nodes[i], effs, &acts[i], &acts[i + 1], &auxs[i], &g, batch, grads);
    }
    g
}

#[allow(clippy::too_many_arguments)]
fn backward_node<S: Scalar>(
    node: &Node,
    effs: &[Eff],
    x: &[S],
    y: &[S],
    aux: &Aux<S>,
    gy: &[S],
    batch: usize,
    grads: &mut [BlockGrad<S>],
) -> Vec<S> {
    let (ni, no) = (node.in_size, node.out_size);
    match &node.op {
        Op::Dense { block } => {
            let e = &effs[*block];
            let gr = &mut grads[*block];
            let mut gx = vec![S::zero(); batch * ni];
            for s in 0..batch {
                let xs = &x[s * ni..(s + 1) * ni];
                let gys = &gy[s * no..(s + 1) * no];
                let gxs = &mut gx[s * ni..(s + 1) * ni];
                for o in 0..no {
                    let go = gys[o];
                    gr.b[o] += go;
                    axpy(&mut gr.w[o * ni..(o + 1) * ni], go, xs);
                    axpy_wt(gxs, go, &e.w[o * ni..(o + 1) * ni]);
                }
            }
            gx
        }
        Op::Conv {
            block,
            c_in,
            c_out,
            k,
            h,
            w,
        } => {
            let e = &effs[*block];
            let p = h * w;
            let q = c_in * k * k;
            let mut cols = vec![S::zero(); q * p];
            let mut gcols = vec![S::zero(); q * p];
            let mut gx = vec![S::zero(); batch * ni];
            let gr = &mut grads[*block];
            for s in 0..batch {
                let xs = &x[s * ni..(s + 1) * ni];
                let src: &[S] = if *k == 1 {
                    xs
                } else {
                    im2col(xs, *c_in, *h, *w, *k, &mut cols);
                    &cols
                };
                let gys = &gy[s * no..(s + 1) * no];
                let gxs = &mut gx[s * ni..(s + 1) * ni];
                let gsrc: &mut [S] = if *k == 1 {
                    &mut *gxs
                } else {
                    gcols.fill(S::zero());
                    &mut gcols
                };
                for co in 0..*c_out {
                    let go = &gys[co * p..(co + 1) * p];
                    let mut gb = S::zero();
                    for v in go {
                        gb += *v;
                    }
                    gr.b[co] += gb;
                    for qq in 0..q {
                        gr.w[co * q + qq] += dot(go, &src[qq * p..(qq + 1) * p]);
                        let wv = e.w[co * q + qq];
                        if wv != 0.0 {
                            axpy_f64(&mut gsrc[qq * p..(qq + 1) * p], wv, go);
                        }
                    }
                }
                if *k != 1 {
                    col2im(&gcols, *c_in, *h, *w, *k, gxs);
                }
            }
            gx
        }
        Op::Residual { body, shortcut } => {
            let (acts, auxs) = match aux {
                Aux::Residual { acts, aux } => (acts, aux),
                _ => unreachable!("residual trace"),
            };
            let mut gx = backward_nodes(body, effs, acts, auxs, body.len(), gy.to_vec(), batch, grads);
            match shortcut {
                None => {
                    for (a, b) in gx.iter_mut().zip(gy) {
                        *a += *b;
                    }
                }
                Some(sc) => {
                    let gs = backward_node(sc, effs, x, y, &Aux::None, gy, batch, grads);
                    for (a, b) in gx.iter_mut().zip(&gs) {
                        *a += *b;
                    }
                }
            }
            gx
        }
        Op::NonLocal {
            blocks,
            c,
            inner,
            n,
            attention,
        } => {
            let (c, m, n) = (*c, *inner, *n);
            let (q_all, k_all, v_all, a_all, y_all) = match aux {
                Aux::NonLocal { q, k, v, attn, y } => (q, k, v, attn, y),
                _ => unreachable!("non-local trace"),
            };
            let mut gx = gy.to_vec();
            for s in 0..batch {
                let xs = &x[s * ni..(s + 1) * ni];
                let gys = &gy[s * ni..(s + 1) * ni];
                let q = &q_all[s * m * n..(s + 1) * m * n];
                let k = &k_all[s * m * n..(s + 1) * m * n];
                let v = &v_all[s * m * n..(s + 1) * m * n];
                let attn = &a_all[s * n * n..(s + 1) * n * n];
                let yv = &y_all[s * m * n..(s + 1) * m * n];

                let mut g_y = vec![S::zero(); m * n];
                project_backward(&effs[blocks[3]], yv, gys, m, n, c, &mut grads[blocks[3]], &mut g_y);

                // y[r, i] = sum_j attn[i, j] v[r, j]
                let mut g_v = vec![S::zero(); m * n];
                let mut g_attn = vec![S::zero(); n * n];
                for r in 0..m {
                    let gyr = &g_y[r * n..(r + 1) * n];
                    let vr = &v[r * n..(r + 1) * n];
                    for i in 0..n {
                        axpy(&mut g_attn[i * n..(i + 1) * n], gyr[i], vr);
                        axpy(&mut g_v[r * n..(r + 1) * n], gyr[i], &attn[i * n..(i + 1) * n]);
                    }
                }
                let gxs = &mut gx[s * ni..(s + 1) * ni];
                project_backward(&effs[blocks[2]], xs, &g_v, c, n, m, &mut grads[blocks[2]], gxs);

                if *attention == Attention::Softmax {
                    let mut g_scores = vec![S::zero(); n * n];
                    for i in 0..n {
                        let a = &attn[i * n..(i + 1) * n];
                        let ga = &g_attn[i * n..(i + 1) * n];
                        let inner_sum = dot(a, ga);
                        for j in 0..n {
                            g_scores[i * n + j] = a[j] * (ga[j] - inner_sum);
                        }
                    }
                    // scores[i, j] = sum_r q[r, i] k[r, j]
                    let mut g_q = vec![S::zero(); m * n];
                    let mut g_k = vec![S::zero(); m * n];
                    for r in 0..m {
                        let kr = &k[r * n..(r + 1) * n];
                        for i in 0..n {
                            let gs = &g_scores[i * n..(i + 1) * n];
                            g_q[r * n + i] = dot(gs, kr);
                            axpy(&mut g_k[r * n..(r + 1) * n], q[r * n + i], gs);
                        }
                    }
                    project_backward(&effs[blocks[0]], xs, &g_q, c, n, m, &mut grads[blocks[0]], gxs);
                    project_backward(&effs[blocks[1]], xs, &g_k, c, n, m, &mut grads[blocks[1]], gxs);
                }
            }
            gx
        }
        Op::Reshape => gy.to_vec(),
        Op::Tanh => gy
            .iter()
            .zip(y)
            .map(|(g, t)| *g * (S::one() - *t * *t))
            .collect(),
        Op::Softmax => {
            let mut gx = vec![S::zero(); batch * ni];
            for s in 0..batch {
                let ys = &y[s * no..(s + 1) * no];
                let gys = &gy[s * no..(s + 1) * no];
                let inner = dot(ys, gys);
                for j in 0..no {
                    gx[s * ni + j] = ys[j] * (gys[j] - inner);
                }
            }
            gx
        }
    }
}

/// Which blocks are consumed as dense layers (and need a transposed copy).
pub(crate) fn dense_blocks(nodes: &[Node], flags: &mut [bool]) {
    for node in nodes {
        match &node.op {
            Op::Dense { block } => flags[*block] = true,
            Op::Residual { body, shortcut } => {
                dense_blocks(body, flags);
                if let Some(sc) = shortcut {
                    dense_blocks(std::slice::from_ref(sc.as_ref()), flags);
                }
            }
            _ => {}
        }
    }
}

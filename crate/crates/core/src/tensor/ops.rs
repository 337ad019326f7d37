use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{numel, Node, Op, Tensor};
use crate::error::{shape_err, Error, Result};

/// Softmax of a plain slice, max-subtracted.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::softmax_into(x, &mut out);
    out
}

/// Area resampling of plain `[planes, h, w]` data to `[planes, oh, ow]`,
/// the same map as [`Tensor::resample`] without recording anything.
pub fn resample_plain(
    x: &[f64],
    planes: usize,
    hw: (usize, usize),
    out: (usize, usize),
) -> Vec<f64> {
    let ry = kernels::area_weights(hw.0, out.0);
    let rx = kernels::area_weights(hw.1, out.1);
    let mut y = vec![0.0; planes * out.0 * out.1];
    kernels::resample_planes(x, planes, hw, out, &ry, &rx, &mut y);
    y
}

fn same_graph(a: &Tensor<'_>, b: &Tensor<'_>) {
    assert!(
        std::ptr::eq(a.graph, b.graph),
        "tensors belong to different graphs"
    );
}

impl<'g> Tensor<'g> {
    fn unary(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Tensor<'g> {
        let rg = self.requires_grad();
        self.graph.push(shape, value, rg, op)
    }

    fn binary_same_shape(
        &self,
        other: &Tensor<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor<'g>> {
        same_graph(self, other);
        let (shape, value, rg) = self.graph.with_nodes(|n| {
            let (a, b) = (&n[self.id], &n[other.id]);
            if a.shape != b.shape {
                return Err(shape_err(name, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let v = a
                .value
                .iter()
                .zip(&b.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok((a.shape.clone(), v, a.requires_grad || b.requires_grad))
        })?;
        Ok(self.graph.push(shape, value, rg, op))
    }

    pub fn add(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary_same_shape(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary_same_shape(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary_same_shape(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Tensor<'g> {
        let v = self.with_value(|x| x.iter().map(|&a| a * c).collect());
        self.unary(self.shape(), v, Op::Scale(self.id, c))
    }

    /// Multiply every element by a differentiable scalar.
    pub fn scale_by(&self, s: &Tensor<'g>) -> Result<Tensor<'g>> {
        same_graph(self, s);
        if s.numel() != 1 {
            return Err(shape_err(
                "scale_by",
                format!("scale must be scalar, got {:?}", s.shape()),
            ));
        }
        let k = s.item();
        let v = self.with_value(|x| x.iter().map(|&a| a * k).collect());
        let rg = self.requires_grad() || s.requires_grad();
        Ok(self
            .graph
            .push(self.shape(), v, rg, Op::ScaleBy(self.id, s.id)))
    }

    pub fn sum(&self) -> Tensor<'g> {
        let s = self.with_value(|x| x.iter().sum());
        self.unary(vec![1], vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Tensor<'g> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `w · x + b` for a vector `self` of length `n`, or row-wise for a
    /// `[rows, n]` matrix; `w` has shape `[m, n]`.
    pub fn linear(&self, w: &Tensor<'g>, b: Option<&Tensor<'g>>) -> Result<Tensor<'g>> {
        same_graph(self, w);
        let (shape, value, rg) = self.graph.with_nodes(|nodes| {
            let (x, wn) = (&nodes[self.id], &nodes[w.id]);
            let (rows, n) = match x.shape[..] {
                [n] => (None, n),
                [r, n] => (Some(r), n),
                _ => {
                    return Err(shape_err(
                        "linear",
                        format!("input must be 1-D or 2-D, got {:?}", x.shape),
                    ))
                }
            };
            if wn.shape.len() != 2 || wn.shape[1] != n {
                return Err(shape_err(
                    "linear",
                    format!(
                        "weight {:?} incompatible with input of length {n}",
                        wn.shape
                    ),
                ));
            }
            let m = wn.shape[0];
            let r = rows.unwrap_or(1);
            let mut y = vec![0.0; r * m];
            if let Some(b) = b {
                let bn = &nodes[b.id];
                if bn.shape != [m] {
                    return Err(shape_err(
                        "linear",
                        format!("bias {:?}, expected [{m}]", bn.shape),
                    ));
                }
                y.chunks_mut(m).for_each(|yr| yr.copy_from_slice(&bn.value));
            }
            for (xr, yr) in x.value.chunks(n).zip(y.chunks_mut(m)) {
                for (i, yi) in yr.iter_mut().enumerate() {
                    let row = &wn.value[i * n..(i + 1) * n];
                    *yi += row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let rg =
                x.requires_grad || wn.requires_grad || b.is_some_and(|b| nodes[b.id].requires_grad);
            let shape = match rows {
                Some(r) => vec![r, m],
                None => vec![m],
            };
            Ok((shape, y, rg))
        })?;
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        Ok(self.graph.push(shape, value, rg, op))
    }

    /// 2-D cross-correlation of an `[N, C, H, W]` input with an `[O, C, K, K]`
    /// kernel (no bias, no kernel flip).
    pub fn conv2d(&self, kernel: &Tensor<'g>, stride: usize, padding: usize) -> Result<Tensor<'g>> {
        same_graph(self, kernel);
        let (shape, value, rg) = self.graph.with_nodes(|nodes| {
            let (x, k) = (&nodes[self.id], &nodes[kernel.id]);
            let (geom, n, o) = conv_geometry(&x.shape, &k.shape, stride, padding)?;
            let cols = geom.col_cols();
            let mut col = vec![0.0; geom.col_rows() * cols];
            let per_in = geom.channels * geom.height * geom.width;
            let mut out = vec![0.0; n * o * cols];
            for s in 0..n {
                kernels::im2col(&x.value[s * per_in..(s + 1) * per_in], &geom, &mut col);
                let kk = geom.col_rows() as isize;
                kernels::gemm(
                    o,
                    geom.col_rows(),
                    cols,
                    &k.value,
                    (kk, 1),
                    &col,
                    (cols as isize, 1),
                    0.0,
                    &mut out[s * o * cols..(s + 1) * o * cols],
                );
            }
            Ok::<_, Error>((
                vec![n, o, geom.out_h, geom.out_w],
                out,
                x.requires_grad || k.requires_grad,
            ))
        })?;
        let op = Op::Conv2d {
            x: self.id,
            k: kernel.id,
            stride,
            padding,
        };
        Ok(self.graph.push(shape, value, rg, op))
    }

    /// Add a per-channel bias `[C]` to an `[N, C, H, W]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
        same_graph(self, bias);
        let (shape, value, rg) = self.graph.with_nodes(|nodes| {
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            if x.shape.len() != 4 || b.shape != [x.shape[1]] {
                return Err(shape_err(
                    "add_channel_bias",
                    format!("input {:?}, bias {:?}", x.shape, b.shape),
                ));
            }
            let plane = x.shape[2] * x.shape[3];
            let c = x.shape[1];
            let mut v = x.value.clone();
            for (i, chunk) in v.chunks_mut(plane).enumerate() {
                let bv = b.value[i % c];
                chunk.iter_mut().for_each(|e| *e += bv);
            }
            Ok((x.shape.clone(), v, x.requires_grad || b.requires_grad))
        })?;
        Ok(self.graph.push(
            shape,
            value,
            rg,
            Op::ChannelBias {
                x: self.id,
                b: bias.id,
            },
        ))
    }

    pub fn relu(&self) -> Tensor<'g> {
        let v = self.with_value(|x| x.iter().map(|&a| a.max(0.0)).collect());
        self.unary(self.shape(), v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Tensor<'g> {
        let v = self.with_value(|x| x.iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect());
        self.unary(self.shape(), v, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Tensor<'g> {
        let v = self.with_value(|x| x.iter().map(|&a| a.tanh()).collect());
        self.unary(self.shape(), v, Op::Tanh(self.id))
    }

    /// Elementwise `1 / x`.
    pub fn recip(&self) -> Tensor<'g> {
        let v = self.with_value(|x| x.iter().map(|&a| 1.0 / a).collect());
        self.unary(self.shape(), v, Op::Recip(self.id))
    }

    /// Block-mean downsampling of the two trailing axes by an integer factor.
    pub fn avg_pool2d(&self, factor: usize) -> Result<Tensor<'g>> {
        let shape = self.shape();
        if shape.len() < 2 || factor == 0 {
            return Err(shape_err(
                "avg_pool2d",
                format!("input {shape:?}, factor {factor}"),
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % factor != 0 || w % factor != 0 {
            return Err(shape_err(
                "avg_pool2d",
                format!("spatial dims {h}x{w} not divisible by {factor}"),
            ));
        }
        self.resample(h / factor, w / factor)
    }

    /// Area-weighted resampling of the two trailing axes to `out_h × out_w`.
    /// Equals [`Tensor::avg_pool2d`] whenever the ratio is an integer.
    pub fn resample(&self, out_h: usize, out_w: usize) -> Result<Tensor<'g>> {
        let mut shape = self.shape();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(shape_err(
                "resample",
                format!("input {shape:?} -> {out_h}x{out_w}"),
            ));
        }
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        if out_h > h || out_w > w {
            return Err(shape_err(
                "resample",
                format!("upsampling {h}x{w} -> {out_h}x{out_w}"),
            ));
        }
        let planes = numel(&shape[..nd - 2]);
        let ry: Rc<[f64]> = kernels::area_weights(h, out_h).into();
        let rx: Rc<[f64]> = kernels::area_weights(w, out_w).into();
        let mut out = vec![0.0; planes * out_h * out_w];
        self.with_value(|x| {
            kernels::resample_planes(x, planes, (h, w), (out_h, out_w), &ry, &rx, &mut out)
        });
        shape[nd - 2] = out_h;
        shape[nd - 1] = out_w;
        Ok(self.unary(shape, out, Op::Resample { x: self.id, ry, rx }))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<'g>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(shape_err(
                "global_avg_pool",
                format!("expected NCHW, got {shape:?}"),
            ));
        }
        let plane = shape[2] * shape[3];
        let v = self.with_value(|x| {
            x.chunks(plane)
                .map(|c| c.iter().sum::<f64>() / plane as f64)
                .collect()
        });
        Ok(self.unary(vec![shape[0], shape[1]], v, Op::GlobalAvgPool(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'g>> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(self.unary(shape.to_vec(), self.value(), Op::Reshape(self.id)))
    }

    /// Contiguous slice of the flattened tensor, returned as a vector.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor<'g>> {
        let n = self.numel();
        if len == 0 || start + len > n {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) of {n}", start + len),
            ));
        }
        let v = self.with_value(|x| x[start..start + len].to_vec());
        Ok(self.unary(vec![len], v, Op::Slice { x: self.id, start }))
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn index(&self, i: usize) -> Result<Tensor<'g>> {
        self.slice(i, 1)
    }

    /// Flatten and concatenate.
    pub fn concat(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let g = first.graph;
        let mut v = Vec::new();
        let mut rg = false;
        for p in parts {
            same_graph(first, p);
            p.with_value(|x| v.extend_from_slice(x));
            rg |= p.requires_grad();
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(g.push(vec![v.len()], v, rg, Op::Concat(ids)))
    }

    pub fn softmax(&self) -> Tensor<'g> {
        let v = self.with_value(softmax);
        self.unary(self.shape(), v, Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Tensor<'g> {
        let v = self.with_value(|x| {
            let lse = kernels::log_sum_exp(x);
            x.iter().map(|&a| a - lse).collect()
        });
        self.unary(self.shape(), v, Op::LogSoftmax(self.id))
    }

    /// `-log softmax(self)[label]` for a logit vector.
    pub fn cross_entropy(&self, label: usize) -> Result<Tensor<'g>> {
        let c = self.numel();
        if c < 2 {
            return Err(shape_err(
                "cross_entropy",
                format!("need at least 2 classes, got {c}"),
            ));
        }
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let loss = self.with_value(|x| kernels::log_sum_exp(x) - x[label]);
        Ok(self.unary(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                label,
            },
        ))
    }

    /// Forward value `hard`, gradient routed to `self` unchanged.
    pub fn straight_through(&self, hard: Vec<f64>) -> Result<Tensor<'g>> {
        if hard.len() != self.numel() {
            return Err(shape_err(
                "straight_through",
                format!("hard has {} entries, soft has {}", hard.len(), self.numel()),
            ));
        }
        Ok(self.unary(self.shape(), hard, Op::StraightThrough { soft: self.id }))
    }
}

fn conv_geometry(
    x: &[usize],
    k: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(ConvGeom, usize, usize)> {
    if x.len() != 4 || k.len() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("expected NCHW input and OIKK kernel, got {x:?}, {k:?}"),
        ));
    }
    if k[1] != x[1] {
        return Err(shape_err(
            "conv2d",
            format!("kernel expects {} input channels, input has {}", k[1], x[1]),
        ));
    }
    if k[2] != k[3] {
        return Err(shape_err(
            "conv2d",
            format!("kernel must be square, got {}x{}", k[2], k[3]),
        ));
    }
    let geom = ConvGeom::new(x[1], x[2], x[3], k[2], stride, padding).ok_or_else(|| {
        shape_err(
            "conv2d",
            format!(
                "kernel {}x{} stride {stride} padding {padding} does not fit {}x{} input",
                k[2], k[3], x[2], x[3]
            ),
        )
    })?;
    Ok((geom, x[0], k[0]))
}

/// Gradient buffer for `id`, or `None` if the node does not need one.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64], c: f64) {
    if let Some(acc) = slot(nodes, grads, id) {
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
    }
}

pub(super) fn backward_rule(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g, 1.0);
            add_into(nodes, grads, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g, 1.0);
            add_into(nodes, grads, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(acc) = slot(nodes, grads, *a) {
                for ((s, gi), bi) in acc.iter_mut().zip(g).zip(vb) {
                    *s += gi * bi;
                }
            }
            if let Some(acc) = slot(nodes, grads, *b) {
                for ((s, gi), ai) in acc.iter_mut().zip(g).zip(va) {
                    *s += gi * ai;
                }
            }
        }
        Op::Scale(a, c) => add_into(nodes, grads, *a, g, *c),
        Op::ScaleBy(a, s) => {
            let k = nodes[*s].value[0];
            add_into(nodes, grads, *a, g, k);
            let va = &nodes[*a].value;
            if let Some(acc) = slot(nodes, grads, *s) {
                acc[0] += g.iter().zip(va).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        Op::Sum(a) => {
            if let Some(acc) = slot(nodes, grads, *a) {
                acc.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let n = *nodes[*x].shape.last().expect("non-empty shape");
            let m = *nodes[*w].shape.first().expect("2-D weight");
            if let Some(acc) = slot(nodes, grads, *x) {
                for (ar, gr) in acc.chunks_mut(n).zip(g.chunks(m)) {
                    for (i, gi) in gr.iter().enumerate() {
                        let row = &vw[i * n..(i + 1) * n];
                        ar.iter_mut().zip(row).for_each(|(a, r)| *a += gi * r);
                    }
                }
            }
            if let Some(acc) = slot(nodes, grads, *w) {
                for (xr, gr) in vx.chunks(n).zip(g.chunks(m)) {
                    for (i, gi) in gr.iter().enumerate() {
                        let row = &mut acc[i * n..(i + 1) * n];
                        row.iter_mut().zip(xr).for_each(|(a, xv)| *a += gi * xv);
                    }
                }
            }
            if let Some(b) = b {
                if let Some(acc) = slot(nodes, grads, *b) {
                    for gr in g.chunks(m) {
                        acc.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            k,
            stride,
            padding,
        } => {
            let (nx, nk) = (&nodes[*x], &nodes[*k]);
            let (geom, n, o) = conv_geometry(&nx.shape, &nk.shape, *stride, *padding)
                .expect("validated in forward");
            let rows = geom.col_rows();
            let cols = geom.col_cols();
            let per_in = geom.channels * geom.height * geom.width;
            let mut col = vec![0.0; rows * cols];
            let need_k = nk.requires_grad;
            let need_x = nx.requires_grad;
            for s in 0..n {
                let gs = &g[s * o * cols..(s + 1) * o * cols];
                if need_k {
                    kernels::im2col(&nx.value[s * per_in..(s + 1) * per_in], &geom, &mut col);
                    let acc = slot(nodes, grads, *k).expect("requires grad");
                    // dK[o, r] += Σ_p g[o, p] · col[r, p]
                    kernels::gemm(
                        o,
                        cols,
                        rows,
                        gs,
                        (cols as isize, 1),
                        &col,
                        (1, cols as isize),
                        1.0,
                        acc,
                    );
                }
                if need_x {
                    // dcol[r, p] = Σ_o K[o, r] · g[o, p]
                    kernels::gemm(
                        rows,
                        o,
                        cols,
                        &nk.value,
                        (1, rows as isize),
                        gs,
                        (cols as isize, 1),
                        0.0,
                        &mut col,
                    );
                    let acc = slot(nodes, grads, *x).expect("requires grad");
                    kernels::col2im(&col, &geom, &mut acc[s * per_in..(s + 1) * per_in]);
                }
            }
        }
        Op::ChannelBias { x, b } => {
            add_into(nodes, grads, *x, g, 1.0);
            let shape = &nodes[*x].shape;
            let (c, plane) = (shape[1], shape[2] * shape[3]);
            if let Some(acc) = slot(nodes, grads, *b) {
                for (i, chunk) in g.chunks(plane).enumerate() {
                    acc[i % c] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value;
            if let Some(acc) = slot(nodes, grads, *a) {
                for ((s, gi), x) in acc.iter_mut().zip(g).zip(va) {
                    if *x > 0.0 {
                        *s += gi;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            if let Some(acc) = slot(nodes, grads, *a) {
                for ((s, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *s += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::Tanh(a) => {
            let y = &node.value;
            if let Some(acc) = slot(nodes, grads, *a) {
                for ((s, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *s += gi * (1.0 - yi * yi);
                }
            }
        }
        Op::Recip(a) => {
            let y = &node.value;
            if let Some(acc) = slot(nodes, grads, *a) {
                for ((s, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *s -= gi * yi * yi;
                }
            }
        }
        Op::Resample { x, ry, rx } => {
            let shape = &nodes[*x].shape;
            let nd = shape.len();
            let (h, w) = (shape[nd - 2], shape[nd - 1]);
            let (oh, ow) = (node.shape[nd - 2], node.shape[nd - 1]);
            let planes = numel(&shape[..nd - 2]);
            if let Some(acc) = slot(nodes, grads, *x) {
                kernels::resample_planes_adjoint(g, planes, (h, w), (oh, ow), ry, rx, acc);
            }
        }
        Op::GlobalAvgPool(a) => {
            let shape = &nodes[*a].shape;
            let plane = shape[2] * shape[3];
            if let Some(acc) = slot(nodes, grads, *a) {
                for (chunk, gi) in acc.chunks_mut(plane).zip(g) {
                    let d = gi / plane as f64;
                    chunk.iter_mut().for_each(|v| *v += d);
                }
            }
        }
        Op::Reshape(a) => add_into(nodes, grads, *a, g, 1.0),
        Op::Slice { x, start } => {
            if let Some(acc) = slot(nodes, grads, *x) {
                acc[*start..*start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                add_into(nodes, grads, p, &g[off..off + len], 1.0);
                off += len;
            }
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            if let Some(acc) = slot(nodes, grads, *a) {
                for ((s, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *s += yi * (gi - dot);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let total: f64 = g.iter().sum();
            if let Some(acc) = slot(nodes, grads, *a) {
                for ((s, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *s += gi - yi.exp() * total;
                }
            }
        }
        Op::CrossEntropy { logits, label } => {
            let p = softmax(&nodes[*logits].value);
            if let Some(acc) = slot(nodes, grads, *logits) {
                for (i, (s, pi)) in acc.iter_mut().zip(&p).enumerate() {
                    let t = if i == *label { 1.0 } else { 0.0 };
                    *s += g[0] * (pi - t);
                }
            }
        }
        Op::StraightThrough { soft } => add_into(nodes, grads, *soft, g, 1.0),
    }
}

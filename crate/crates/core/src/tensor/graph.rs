use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node of a [`Graph`].
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
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Reshape(Var),
    AvgPool2d {
        x: Var,
        size: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CosineDistance {
        u: Var,
        v: Var,
    },
    L2Distance {
        u: Var,
        v: Var,
    },
    /// KL(softmax(target/t) || softmax(pred/t)), batch mean.
    KlDivergence {
        target: Var,
        pred: Var,
        t: f64,
        p: Vec<f64>,
        q: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Added to vector norms before dividing in the cosine distance.
pub const COSINE_NORM_EPS: f64 = 1e-12;

/// Define-by-run computation record. Nodes are appended in evaluation order,
/// so the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor. Non-finite entries are rejected here.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("graph input of shape {:?}", t.shape())));
        }
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.clear_grad());
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `y = x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Dimension(format!("affine: input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * dout];
        par::for_each_row(&mut out, dout, n * din * dout, |i, row| {
            row.copy_from_slice(bd);
            let xr = &xd[i * din..(i + 1) * din];
            for (k, &xk) in xr.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wr = &wd[k * dout..(k + 1) * dout];
                for (o, &wv) in row.iter_mut().zip(wr) {
                    *o += xk * wv;
                }
            }
        });
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(vec![n, dout], out), Op::Affine { x, w, b }, rg))
    }

    /// Cross-correlation of `x: [n, c, h, w]` with `k: [f, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::Dimension(format!("conv2d: input {xs:?}, kernel {ks:?}")));
        }
        let geo = ConvGeometry::new(&xs, &ks, stride, pad)?;
        let out = conv_forward(self.value(x).data(), self.value(k).data(), &geo);
        let rg = self.rg(&[x, k]);
        Ok(self.push(Tensor::from_parts(vec![geo.n, geo.f, geo.oh, geo.ow], out), Op::Conv2d { x, k, stride, pad }, rg))
    }

    /// Adds `b[c]` to every spatial position of channel `c` of `x: [n, c, h, w]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Dimension(format!("channel bias: input {xs:?}, bias {bs:?}")));
        }
        let plane = xs[2] * xs[3];
        let c = xs[1];
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = bd[idx % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ChannelBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = vec![v.rows(), v.row_len()];
        self.reshape(x, shape)
    }

    /// Non-overlapping `size × size` mean pooling.
    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || size == 0 || !xs[2].is_multiple_of(size) || !xs[3].is_multiple_of(size) {
            return Err(Error::Config(format!("avg_pool2d of size {size} on {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / size, w / size);
        let xd = self.value(x).data();
        let scale = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..size {
                        for dj in 0..size {
                            s += xd[nc * h * w + (i * size + di) * w + j * size + dj];
                        }
                    }
                    out[nc * oh * ow + i * ow + j] = s * scale;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], out), Op::AvgPool2d { x, size }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Batch mean of `-log softmax(logits)[label]`, stabilised by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Dimension(format!("cross entropy: logits {ls:?} with {} labels", labels.len())));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} with {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            total += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Batch mean of `1 - cos(u_i, v_i)` with `COSINE_NORM_EPS` added to each norm.
    pub fn cosine_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        let (n, k) = self.paired_rows(u, v, "cosine distance")?;
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let mut total = 0.0;
        for i in 0..n {
            let (a, b) = (&ud[i * k..(i + 1) * k], &vd[i * k..(i + 1) * k]);
            let nu = norm(a) + COSINE_NORM_EPS;
            let nv = norm(b) + COSINE_NORM_EPS;
            total += 1.0 - dot(a, b) / (nu * nv);
        }
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::CosineDistance { u, v }, rg))
    }

    /// Batch mean of `||u_i - v_i||_2`.
    pub fn l2_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        let (n, k) = self.paired_rows(u, v, "l2 distance")?;
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let total: f64 = (0..n)
            .map(|i| {
                ud[i * k..(i + 1) * k]
                    .iter()
                    .zip(&vd[i * k..(i + 1) * k])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::L2Distance { u, v }, rg))
    }

    /// Batch mean of `KL(softmax(target/t) || softmax(pred/t))`.
    pub fn kl_divergence(&mut self, target: Var, pred: Var, t: f64) -> Result<Var> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
        let (n, c) = self.paired_rows(target, pred, "kl divergence")?;
        let (a, b) = (self.value(target).data(), self.value(pred).data());
        let mut p = vec![0.0; n * c];
        let mut q = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let ra: Vec<f64> = a[i * c..(i + 1) * c].iter().map(|v| v / t).collect();
            let rb: Vec<f64> = b[i * c..(i + 1) * c].iter().map(|v| v / t).collect();
            let (la, lb) = (log_sum_exp(&ra), log_sum_exp(&rb));
            for j in 0..c {
                let lp = ra[j] - la;
                let lq = rb[j] - lb;
                p[i * c + j] = lp.exp();
                q[i * c + j] = lq.exp();
                total += p[i * c + j] * (lp - lq);
            }
        }
        let rg = self.rg(&[target, pred]);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::KlDivergence { target, pred, t, p, q }, rg))
    }

    fn paired_rows(&self, u: Var, v: Var, what: &str) -> Result<(usize, usize)> {
        let (us, vs) = (self.shape(u), self.shape(v));
        if us != vs || us.len() != 2 {
            return Err(Error::Dimension(format!("{what}: {us:?} vs {vs:?}")));
        }
        Ok((us[0], us[1]))
    }

    /// Reverse sweep from a scalar sink. Gradients accumulate into every
    /// node's grad slot; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, sink: Var) -> Result<()> {
        let sink_value = &self.nodes[sink.0].value;
        if !sink_value.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar sink, got shape {:?}", sink_value.shape())));
        }
        if !sink_value.is_finite() {
            return Err(Error::NonFinite("backward sink".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=sink.0).map(|_| None).collect();
        grads[sink.0] = Some(vec![1.0]);

        for id in (0..=sink.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &dy, &mut grads);
            self.nodes[id].value.accumulate_grad(&dy);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[1];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * din];
                    par::for_each_row(&mut dx, din, n * din * dout, |i, row| {
                        let g = &dy[i * dout..(i + 1) * dout];
                        for (k, r) in row.iter_mut().enumerate() {
                            *r = dot(g, &wd[k * dout..(k + 1) * dout]);
                        }
                    });
                    send(*x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; din * dout];
                    par::for_each_row(&mut dw, dout, n * din * dout, |k, row| {
                        for i in 0..n {
                            let xik = xd[i * din + k];
                            if xik == 0.0 {
                                continue;
                            }
                            for (r, g) in row.iter_mut().zip(&dy[i * dout..(i + 1) * dout]) {
                                *r += xik * g;
                            }
                        }
                    });
                    send(*w, dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; dout];
                    for row in dy.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    send(*b, db);
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let geo =
                    ConvGeometry::new(self.shape(*x), self.shape(*k), *stride, *pad).expect("validated in forward");
                let (dx, dk) = conv_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    dy,
                    &geo,
                    self.nodes[x.0].requires_grad,
                    self.nodes[k.0].requires_grad,
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*k, dk);
                }
            }
            Op::ChannelBias { x, b } => {
                send(*x, dy.to_vec());
                let xs = self.shape(*x);
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                let mut db = vec![0.0; c];
                for (idx, chunk) in dy.chunks(plane).enumerate() {
                    db[idx % c] += chunk.iter().sum::<f64>();
                }
                send(*b, db);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                send(*x, xd.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect());
            }
            Op::Reshape(x) => send(*x, dy.to_vec()),
            Op::AvgPool2d { x, size } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / size, w / size);
                let scale = 1.0 / (size * size) as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for nc in 0..xs[0] * xs[1] {
                    for i in 0..h {
                        for j in 0..w {
                            dx[nc * h * w + i * w + j] = dy[nc * oh * ow + (i / size) * ow + j / size] * scale;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                send(*a, dy.to_vec());
                send(*b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let da = dy.iter().zip(bd).map(|(g, v)| g * v).collect();
                let db = dy.iter().zip(ad).map(|(g, v)| g * v).collect();
                send(*a, da);
                send(*b, db);
            }
            Op::Scale(x, c) => send(*x, dy.iter().map(|g| g * c).collect()),
            Op::Sum(x) => send(*x, vec![dy[0]; self.value(*x).len()]),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = dy[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= s;
                }
                send(*logits, d);
            }
            Op::CosineDistance { u, v } => {
                let us = self.shape(*u);
                let (n, k) = (us[0], us[1]);
                let (ud, vd) = (self.value(*u).data(), self.value(*v).data());
                let s = -dy[0] / n as f64;
                let mut du = vec![0.0; n * k];
                let mut dv = vec![0.0; n * k];
                for i in 0..n {
                    let (a, b) = (&ud[i * k..(i + 1) * k], &vd[i * k..(i + 1) * k]);
                    let (ra, rb) = (norm(a), norm(b));
                    let (na, nb) = (ra + COSINE_NORM_EPS, rb + COSINE_NORM_EPS);
                    let ab = dot(a, b);
                    // d cos / d a = b/(na nb) - ab/(na^2 nb) * a/|a|
                    let ca = if ra > 0.0 { ab / (na * na * nb * ra) } else { 0.0 };
                    let cb = if rb > 0.0 { ab / (na * nb * nb * rb) } else { 0.0 };
                    for j in 0..k {
                        du[i * k + j] = s * (b[j] / (na * nb) - ca * a[j]);
                        dv[i * k + j] = s * (a[j] / (na * nb) - cb * b[j]);
                    }
                }
                send(*u, du);
                send(*v, dv);
            }
            Op::L2Distance { u, v } => {
                let us = self.shape(*u);
                let (n, k) = (us[0], us[1]);
                let (ud, vd) = (self.value(*u).data(), self.value(*v).data());
                let s = dy[0] / n as f64;
                let mut du = vec![0.0; n * k];
                for i in 0..n {
                    let diff: Vec<f64> = (0..k).map(|j| ud[i * k + j] - vd[i * k + j]).collect();
                    let r = norm(&diff);
                    if r > 0.0 {
                        for j in 0..k {
                            du[i * k + j] = s * diff[j] / r;
                        }
                    }
                }
                let dv = du.iter().map(|g| -g).collect();
                send(*u, du);
                send(*v, dv);
            }
            Op::KlDivergence { target, pred, t, p, q } => {
                let ts = self.shape(*target);
                let (n, c) = (ts[0], ts[1]);
                let s = dy[0] / (n as f64 * t);
                let dpred = p.iter().zip(q).map(|(pi, qi)| s * (qi - pi)).collect();
                let mut dtarget = vec![0.0; n * c];
                for i in 0..n {
                    let row = i * c..(i + 1) * c;
                    let logratio: Vec<f64> =
                        p[row.clone()].iter().zip(&q[row.clone()]).map(|(a, b)| a.ln() - b.ln()).collect();
                    let kl: f64 = p[row.clone()].iter().zip(&logratio).map(|(a, l)| a * l).sum();
                    for j in 0..c {
                        let pj = p[i * c + j];
                        dtarget[i * c + j] = if pj > 0.0 { s * pj * (logratio[j] - kl) } else { 0.0 };
                    }
                }
                send(*target, dtarget);
                send(*pred, dpred);
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if !(h + 2 * pad - kh).is_multiple_of(stride) || !(w + 2 * pad - kw).is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "conv2d output extent not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, c, h, w, f, kh, kw, oh, ow, stride, pad })
    }

    /// Input coordinate touched by output `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn conv_forward(x: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
    let plane = g.oh * g.ow;
    let work = g.n * g.f * plane * g.c * g.kh * g.kw;
    par::for_each_row(&mut out, plane, work, |nf, o| {
        let (b, f) = (nf / g.f, nf % g.f);
        for c in 0..g.c {
            let xb = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
            let kb = &k[(f * g.c + c) * g.kh * g.kw..(f * g.c + c + 1) * g.kh * g.kw];
            for i in 0..g.oh {
                for di in 0..g.kh {
                    let Some(si) = g.src(i, di, g.h) else { continue };
                    for j in 0..g.ow {
                        let mut acc = 0.0;
                        for dj in 0..g.kw {
                            if let Some(sj) = g.src(j, dj, g.w) {
                                acc += xb[si * g.w + sj] * kb[di * g.kw + dj];
                            }
                        }
                        o[i * g.ow + j] += acc;
                    }
                }
            }
        }
    });
    out
}

fn conv_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.oh * g.ow;
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; x.len()];
        // One row per (sample, input channel) so writes never collide.
        par::for_each_row(&mut dx, g.h * g.w, dy.len() * g.c * g.kh * g.kw, |bc, dxb| {
            let (b, c) = (bc / g.c, bc % g.c);
            for f in 0..g.f {
                let dyb = &dy[(b * g.f + f) * plane..(b * g.f + f + 1) * plane];
                let kb = &k[(f * g.c + c) * g.kh * g.kw..(f * g.c + c + 1) * g.kh * g.kw];
                for i in 0..g.oh {
                    for di in 0..g.kh {
                        let Some(si) = g.src(i, di, g.h) else { continue };
                        for j in 0..g.ow {
                            let gy = dyb[i * g.ow + j];
                            for dj in 0..g.kw {
                                if let Some(sj) = g.src(j, dj, g.w) {
                                    dxb[si * g.w + sj] += gy * kb[di * g.kw + dj];
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    });
    let dk = want_dk.then(|| {
        let mut dk = vec![0.0; k.len()];
        par::for_each_row(&mut dk, g.kh * g.kw, dy.len() * g.c * g.kh * g.kw, |fc, dkb| {
            let (f, c) = (fc / g.c, fc % g.c);
            for b in 0..g.n {
                let dyb = &dy[(b * g.f + f) * plane..(b * g.f + f + 1) * plane];
                let xb = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                for di in 0..g.kh {
                    for dj in 0..g.kw {
                        let mut acc = 0.0;
                        for i in 0..g.oh {
                            let Some(si) = g.src(i, di, g.h) else { continue };
                            for j in 0..g.ow {
                                if let Some(sj) = g.src(j, dj, g.w) {
                                    acc += dyb[i * g.ow + j] * xb[si * g.w + sj];
                                }
                            }
                        }
                        dkb[di * g.kw + dj] += acc;
                    }
                }
            }
        });
        dk
    });
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = g.constant(Tensor::identity(2)).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(t(&[1, 2], &[2.0, 3.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, -1.0])).unwrap();
        let b = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0, -1.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3])).unwrap();
        let w = g.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2])).unwrap();
        let msg = g.affine(x, w, b).unwrap_err().to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn affine_weight_gradient_matches_finite_differences() {
        let params = vec![
            t(&[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]),
            t(&[3, 2], &[0.5, -0.3, 1.1, 0.9, -0.8, 0.2]),
            t(&[2], &[0.05, -0.1]),
        ];
        let err = finite_difference_check(
            |g, p| {
                let y = g.affine(p[0], p[1], p[2])?;
                Ok(g.sum(y))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_identity_and_zero_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = g.conv2d(xv, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), x.data());
        let k0 = g.constant(Tensor::zeros(vec![2, 1, 2, 2])).unwrap();
        let y0 = g.conv2d(xv, k0, 1, 1).unwrap();
        assert_eq!(g.value(y0).shape(), &[1, 2, 4, 4]);
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 4, 4])).unwrap();
        let k = g.constant(Tensor::zeros(vec![1, 1, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, k, 2, 0), Err(Error::Config(_))));
        let big = g.constant(Tensor::zeros(vec![1, 1, 7, 7])).unwrap();
        assert!(matches!(g.conv2d(x, big, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        let params = vec![t(&[1, 1, 3, 3], &[0.2, -0.5, 0.1, 0.7, 0.3, -0.9, 0.4, 0.6, -0.2])];
        let err = finite_difference_check(
            |g, p| {
                let xv = g.constant(t(&[1, 1, 4, 4], &x))?;
                let y = g.conv2d(xv, p[0], 1, 1)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_values_and_mask() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let z = g.constant(t(&[1, 2], &[1000.0, -1000.0])).unwrap();
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).item().abs() < 1e-300);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert!(matches!(g.softmax_cross_entropy(z, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0], "repeated backward accumulates");
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_sink() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let c = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn pool_and_bias_gradients() {
        let params = vec![t(&[1, 2, 2, 2], &[0.1, -0.3, 0.5, 0.2, -0.7, 0.9, 0.4, -0.1]), t(&[2], &[0.3, -0.2])];
        let err = finite_difference_check(
            |g, p| {
                let y = g.channel_bias(p[0], p[1])?;
                let y = g.avg_pool2d(y, 2)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}

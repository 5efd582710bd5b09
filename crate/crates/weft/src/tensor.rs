//! Dense f64 tensors and a small reverse-mode autodiff graph.
//!
//! The graph is define-by-run: every op computes its value eagerly and records
//! enough metadata to propagate gradients backwards. Everything is
//! single-threaded and allocation-order deterministic, which keeps sampling
//! and training runs bitwise reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, WeftError};

/// Contiguous row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Standard normal draws in row-major order from the given rng.
    pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Snap every entry to the nearest f32. Parameters live on the f32 grid so
    /// checkpoints (stored as f32) round-trip without loss.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "mse shape mismatch");
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

/// FNV-1a over a byte slice. Used for content addressing and seed derivation.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// FNV-1a over a tensor's raw little-endian f64 bytes.
pub fn tensor_hash(t: &Tensor) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in t.data() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Stable seed derivation: mixes a root seed with a label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    fnv1a64(label.as_bytes()) ^ root.rotate_left(17)
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    MatmulNN { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    SoftmaxRows { x: Var },
    Silu { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, eps: f64 },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddChannelBias { x: Var, v: Var },
    Reshape { x: Var },
    ToTokens { x: Var },
    FromTokens { x: Var, c: usize, h: usize, w: usize },
    NearestUp2 { x: Var },
    ConcatChannels { a: Var, b: Var },
    ConcatRows { a: Var, b: Var },
    Mse { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs: bool,
}

/// Reverse-mode tape. Push ops, then call [`Graph::backward`] on a scalar.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D convolution over `[C_in, H, W]` with kernel `[C_out, C_in, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [O,I,K,K]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let value = conv2d_forward(self.val(x), self.val(w), self.val(b), stride, pad);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Row-batched affine map: `[S, In] x [Out, In]^T + [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 2, "linear input must be [S,In]");
        assert_eq!(ws[1], xs[1], "linear feature mismatch");
        let (s, nin, nout) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (self.val(x).data(), self.val(w).data(), self.val(b).data());
        let mut out = vec![0.0; s * nout];
        for i in 0..s {
            let xr = &xd[i * nin..(i + 1) * nin];
            let or = &mut out[i * nout..(i + 1) * nout];
            for o in 0..nout {
                let wr = &wd[o * nin..(o + 1) * nin];
                let mut acc = bd[o];
                for k in 0..nin {
                    acc += xr[k] * wr[k];
                }
                or[o] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::from_vec(&[s, nout], out), Op::Linear { x, w, b }, needs)
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (asn, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(asn[1], bs[0], "matmul inner dim mismatch");
        let (m, k, n) = (asn[0], asn[1], bs[1]);
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let or = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let br = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatmulNN { a, b }, needs)
    }

    /// `[M, D] x [N, D]^T`, the score layout used by attention.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (asn, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(asn[1], bs[1], "matmul_nt feature dim mismatch");
        let (m, d, n) = (asn[0], asn[1], bs[0]);
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * d..(i + 1) * d];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let br = &bd[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for p in 0..d {
                    acc += ar[p] * br[p];
                }
                or[j] = acc;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatmulNT { a, b }, needs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "softmax_rows input must be 2-D");
        let (m, n) = (xs[0], xs[1]);
        let xd = self.val(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = &xd[i * n..(i + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            let mx = xr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..n {
                or[j] = (xr[j] - mx).exp();
                sum += or[j];
            }
            for v in or.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[m, n], out), Op::SoftmaxRows { x }, needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = Tensor::from_vec(
            self.shape(x),
            self.val(x).data().iter().map(|&v| v * sigmoid(v)).collect(),
        );
        let needs = self.needs(x);
        self.push(value, Op::Silu { x }, needs)
    }

    /// Group normalization over `[C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let eps = 1e-5;
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "group_norm input must be [C,H,W]");
        assert_eq!(xs[0] % groups, 0, "channels not divisible by groups");
        let value = group_norm_forward(self.val(x), self.val(gamma), self.val(beta), groups, eps);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, eps }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = Tensor::from_vec(
            self.shape(a),
            self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x + y).collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value =
            Tensor::from_vec(self.shape(x), self.val(x).data().iter().map(|&v| v * c).collect());
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    /// `[C, H, W] + [C]` broadcast over the spatial dims.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "add_channel_bias input must be [C,H,W]");
        assert_eq!(self.shape(v), &[xs[0]], "bias must be [C]");
        let hw = xs[1] * xs[2];
        let (xd, vd) = (self.val(x).data(), self.val(v).data());
        let mut out = xd.to_vec();
        for c in 0..xs[0] {
            let bias = vd[c];
            for p in &mut out[c * hw..(c + 1) * hw] {
                *p += bias;
            }
        }
        let needs = self.needs(x) || self.needs(v);
        self.push(Tensor::from_vec(&xs, out), Op::AddChannelBias { x, v }, needs)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.val(x).len(), n, "reshape element count mismatch");
        let value = Tensor::from_vec(shape, self.val(x).data().to_vec());
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    /// `[C, H, W]` to `[H*W, C]` token layout.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "to_tokens input must be [C,H,W]");
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let xd = self.val(x).data();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = xd[ch * hw + p];
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[hw, c], out), Op::ToTokens { x }, needs)
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs, vec![h * w, c], "from_tokens shape mismatch");
        let hw = h * w;
        let xd = self.val(x).data();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = xd[p * c + ch];
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::FromTokens { x, c, h, w }, needs)
    }

    /// Nearest-neighbor 2x spatial upsample.
    pub fn nearest_up2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "nearest_up2 input must be [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = self.val(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..oh {
                let sy = y / 2;
                let src = &xd[ch * h * w + sy * w..ch * h * w + (sy + 1) * w];
                let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
                for x2 in 0..ow {
                    dst[x2] = src[x2 / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[c, oh, ow], out), Op::NearestUp2 { x }, needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (asn, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(asn.len(), 3, "concat_channels inputs must be [C,H,W]");
        assert_eq!(&asn[1..], &bs[1..], "concat_channels spatial mismatch");
        let mut data = self.val(a).data().to_vec();
        data.extend_from_slice(self.val(b).data());
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_vec(&[asn[0] + bs[0], asn[1], asn[2]], data),
            Op::ConcatChannels { a, b },
            needs,
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (asn, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(asn.len(), 2, "concat_rows inputs must be 2-D");
        assert_eq!(asn[1], bs[1], "concat_rows feature mismatch");
        let mut data = self.val(a).data().to_vec();
        data.extend_from_slice(self.val(b).data());
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_vec(&[asn[0] + bs[0], asn[1]], data),
            Op::ConcatRows { a, b },
            needs,
        )
    }

    /// Mean squared error reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let v = self.val(a).mse(self.val(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(v), Op::Mse { a, b }, needs)
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        debug_assert_eq!(self.nodes[v.0].value.shape(), g.shape());
        match &mut self.nodes[v.0].grad {
            Some(existing) => {
                for (e, gv) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += gv;
                }
            }
            None => self.nodes[v.0].grad = Some(g),
        }
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(WeftError::InvalidTensor("backward expects a scalar loss".into()));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let gy = self.nodes[i].grad.clone().unwrap();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv2d_backward(
                        self.val(x),
                        self.val(w),
                        &gy,
                        stride,
                        pad,
                        self.needs(x),
                        self.needs(w) || self.needs(b),
                    );
                    if self.needs(x) {
                        self.acc(x, dx.unwrap());
                    }
                    if self.needs(w) {
                        self.acc(w, dw.unwrap());
                    }
                    if self.needs(b) {
                        self.acc(b, db.unwrap());
                    }
                }
                Op::Linear { x, w, b } => {
                    let (s, nin) = (self.shape(x)[0], self.shape(x)[1]);
                    let nout = self.shape(w)[0];
                    let gyd = gy.data();
                    if self.needs(x) {
                        let wd = self.val(w).data();
                        let mut dx = vec![0.0; s * nin];
                        for i2 in 0..s {
                            let gr = &gyd[i2 * nout..(i2 + 1) * nout];
                            let dr = &mut dx[i2 * nin..(i2 + 1) * nin];
                            for o in 0..nout {
                                let gv = gr[o];
                                let wr = &wd[o * nin..(o + 1) * nin];
                                for k in 0..nin {
                                    dr[k] += gv * wr[k];
                                }
                            }
                        }
                        self.acc(x, Tensor::from_vec(&[s, nin], dx));
                    }
                    if self.needs(w) {
                        let xd = self.val(x).data();
                        let mut dw = vec![0.0; nout * nin];
                        for i2 in 0..s {
                            let gr = &gyd[i2 * nout..(i2 + 1) * nout];
                            let xr = &xd[i2 * nin..(i2 + 1) * nin];
                            for o in 0..nout {
                                let gv = gr[o];
                                let dr = &mut dw[o * nin..(o + 1) * nin];
                                for k in 0..nin {
                                    dr[k] += gv * xr[k];
                                }
                            }
                        }
                        self.acc(w, Tensor::from_vec(&[nout, nin], dw));
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; nout];
                        for i2 in 0..s {
                            for o in 0..nout {
                                db[o] += gyd[i2 * nout + o];
                            }
                        }
                        self.acc(b, Tensor::from_vec(&[nout], db));
                    }
                }
                Op::MatmulNN { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    let gyd = gy.data();
                    if self.needs(a) {
                        let bd = self.val(b).data();
                        let mut da = vec![0.0; m * k];
                        for i2 in 0..m {
                            let gr = &gyd[i2 * n..(i2 + 1) * n];
                            let dr = &mut da[i2 * k..(i2 + 1) * k];
                            for p in 0..k {
                                let br = &bd[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += gr[j] * br[j];
                                }
                                dr[p] = acc;
                            }
                        }
                        self.acc(a, Tensor::from_vec(&[m, k], da));
                    }
                    if self.needs(b) {
                        let ad = self.val(a).data();
                        let mut db = vec![0.0; k * n];
                        for i2 in 0..m {
                            let gr = &gyd[i2 * n..(i2 + 1) * n];
                            for p in 0..k {
                                let av = ad[i2 * k + p];
                                let dr = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    dr[j] += av * gr[j];
                                }
                            }
                        }
                        self.acc(b, Tensor::from_vec(&[k, n], db));
                    }
                }
                Op::MatmulNT { a, b } => {
                    let (m, d) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[0];
                    let gyd = gy.data();
                    if self.needs(a) {
                        let bd = self.val(b).data();
                        let mut da = vec![0.0; m * d];
                        for i2 in 0..m {
                            let gr = &gyd[i2 * n..(i2 + 1) * n];
                            let dr = &mut da[i2 * d..(i2 + 1) * d];
                            for j in 0..n {
                                let gv = gr[j];
                                let br = &bd[j * d..(j + 1) * d];
                                for p in 0..d {
                                    dr[p] += gv * br[p];
                                }
                            }
                        }
                        self.acc(a, Tensor::from_vec(&[m, d], da));
                    }
                    if self.needs(b) {
                        let ad = self.val(a).data();
                        let mut db = vec![0.0; n * d];
                        for i2 in 0..m {
                            let gr = &gyd[i2 * n..(i2 + 1) * n];
                            let ar = &ad[i2 * d..(i2 + 1) * d];
                            for j in 0..n {
                                let gv = gr[j];
                                let dr = &mut db[j * d..(j + 1) * d];
                                for p in 0..d {
                                    dr[p] += gv * ar[p];
                                }
                            }
                        }
                        self.acc(b, Tensor::from_vec(&[n, d], db));
                    }
                }
                Op::SoftmaxRows { x } => {
                    if self.needs(x) {
                        let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                        let yd = self.val(Var(i)).data().to_vec();
                        let gyd = gy.data();
                        let mut dx = vec![0.0; m * n];
                        for i2 in 0..m {
                            let yr = &yd[i2 * n..(i2 + 1) * n];
                            let gr = &gyd[i2 * n..(i2 + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            let dr = &mut dx[i2 * n..(i2 + 1) * n];
                            for j in 0..n {
                                dr[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        self.acc(x, Tensor::from_vec(&[m, n], dx));
                    }
                }
                Op::Silu { x } => {
                    if self.needs(x) {
                        let dx: Vec<f64> = self
                            .val(x)
                            .data()
                            .iter()
                            .zip(gy.data())
                            .map(|(&v, &g)| {
                                let s = sigmoid(v);
                                g * s * (1.0 + v * (1.0 - s))
                            })
                            .collect();
                        let shape = self.shape(x).to_vec();
                        self.acc(x, Tensor::from_vec(&shape, dx));
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    let (dx, dgamma, dbeta) = group_norm_backward(
                        self.val(x),
                        self.val(gamma),
                        &gy,
                        groups,
                        eps,
                        self.needs(x),
                    );
                    if self.needs(x) {
                        self.acc(x, dx.unwrap());
                    }
                    if self.needs(gamma) {
                        self.acc(gamma, dgamma);
                    }
                    if self.needs(beta) {
                        self.acc(beta, dbeta);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        self.acc(a, gy.clone());
                    }
                    if self.needs(b) {
                        self.acc(b, gy.clone());
                    }
                }
                Op::Scale { x, c } => {
                    if self.needs(x) {
                        let shape = self.shape(x).to_vec();
                        let dx = gy.data().iter().map(|&g| g * c).collect();
                        self.acc(x, Tensor::from_vec(&shape, dx));
                    }
                }
                Op::AddChannelBias { x, v } => {
                    if self.needs(x) {
                        self.acc(x, gy.clone());
                    }
                    if self.needs(v) {
                        let xs = self.shape(x).to_vec();
                        let hw = xs[1] * xs[2];
                        let mut dv = vec![0.0; xs[0]];
                        for c in 0..xs[0] {
                            dv[c] = gy.data()[c * hw..(c + 1) * hw].iter().sum();
                        }
                        self.acc(v, Tensor::from_vec(&[xs[0]], dv));
                    }
                }
                Op::Reshape { x } => {
                    if self.needs(x) {
                        let shape = self.shape(x).to_vec();
                        self.acc(x, Tensor::from_vec(&shape, gy.data().to_vec()));
                    }
                }
                Op::ToTokens { x } => {
                    if self.needs(x) {
                        let xs = self.shape(x).to_vec();
                        let (c, hw) = (xs[0], xs[1] * xs[2]);
                        let gyd = gy.data();
                        let mut dx = vec![0.0; c * hw];
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[ch * hw + p] = gyd[p * c + ch];
                            }
                        }
                        self.acc(x, Tensor::from_vec(&xs, dx));
                    }
                }
                Op::FromTokens { x, c, h, w } => {
                    if self.needs(x) {
                        let hw = h * w;
                        let gyd = gy.data();
                        let mut dx = vec![0.0; hw * c];
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[p * c + ch] = gyd[ch * hw + p];
                            }
                        }
                        self.acc(x, Tensor::from_vec(&[hw, c], dx));
                    }
                }
                Op::NearestUp2 { x } => {
                    if self.needs(x) {
                        let xs = self.shape(x).to_vec();
                        let (c, h, w) = (xs[0], xs[1], xs[2]);
                        let (oh, ow) = (2 * h, 2 * w);
                        let gyd = gy.data();
                        let mut dx = vec![0.0; c * h * w];
                        for ch in 0..c {
                            for y in 0..oh {
                                for x2 in 0..ow {
                                    dx[ch * h * w + (y / 2) * w + x2 / 2] +=
                                        gyd[ch * oh * ow + y * ow + x2];
                                }
                            }
                        }
                        self.acc(x, Tensor::from_vec(&xs, dx));
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let an = self.val(a).len();
                    if self.needs(a) {
                        let shape = self.shape(a).to_vec();
                        self.acc(a, Tensor::from_vec(&shape, gy.data()[..an].to_vec()));
                    }
                    if self.needs(b) {
                        let shape = self.shape(b).to_vec();
                        self.acc(b, Tensor::from_vec(&shape, gy.data()[an..].to_vec()));
                    }
                }
                Op::ConcatRows { a, b } => {
                    let an = self.val(a).len();
                    if self.needs(a) {
                        let shape = self.shape(a).to_vec();
                        self.acc(a, Tensor::from_vec(&shape, gy.data()[..an].to_vec()));
                    }
                    if self.needs(b) {
                        let shape = self.shape(b).to_vec();
                        self.acc(b, Tensor::from_vec(&shape, gy.data()[an..].to_vec()));
                    }
                }
                Op::Mse { a, b } => {
                    let n = self.val(a).len() as f64;
                    let g = gy.data()[0];
                    let diff: Vec<f64> = self
                        .val(a)
                        .data()
                        .iter()
                        .zip(self.val(b).data())
                        .map(|(x, y)| g * 2.0 * (x - y) / n)
                        .collect();
                    if self.needs(a) {
                        let shape = self.shape(a).to_vec();
                        self.acc(a, Tensor::from_vec(&shape, diff.clone()));
                    }
                    if self.needs(b) {
                        let shape = self.shape(b).to_vec();
                        let neg = diff.iter().map(|&v| -v).collect();
                        self.acc(b, Tensor::from_vec(&shape, neg));
                    }
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_out_dim(i: usize, k: usize, stride: usize, pad: usize) -> usize {
    (i + 2 * pad - k) / stride + 1
}

/// Output column range for which `ox*stride + kx - pad` stays inside `[0, w)`.
fn col_range(w: usize, ow: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let max_ix = w as i64 - 1 - kx as i64 + pad as i64;
    if max_ix < 0 {
        return (0, 0);
    }
    let hi = ((max_ix as usize) / stride + 1).min(ow);
    (lo.min(hi), hi)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (conv_out_dim(h, k, stride, pad), conv_out_dim(wd, k, stride, pad));
    let (xd, wdp, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let op = &mut out[co * oh * ow..(co + 1) * oh * ow];
        op.fill(bd[co]);
        for ci in 0..cin {
            let xp = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdp[((co * cin + ci) * k + ky) * k + kx];
                    let (lo, hi) = col_range(wd, ow, kx, stride, pad);
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xr = &xp[(iy - pad) * wd..(iy - pad + 1) * wd];
                        let orow = &mut op[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            orow[ox] += wv * xr[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cout, oh, ow], out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
    let (xd, wdp, gyd) = (x.data(), w.data(), gy.data());

    let mut dx = if need_dx { vec![0.0; cin * h * wd] } else { Vec::new() };
    let mut dw = if need_dw { vec![0.0; cout * cin * k * k] } else { Vec::new() };
    let mut db = if need_dw { vec![0.0; cout] } else { Vec::new() };

    for co in 0..cout {
        let gp = &gyd[co * oh * ow..(co + 1) * oh * ow];
        if need_dw {
            db[co] = gp.iter().sum();
        }
        for ci in 0..cin {
            let xp = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = wdp[widx];
                    let (lo, hi) = col_range(wd, ow, kx, stride, pad);
                    let mut wacc = 0.0;
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let row = (iy - pad) * wd;
                        let grow = &gp[oy * ow..(oy + 1) * ow];
                        if need_dw {
                            let xr = &xp[row..row + wd];
                            for ox in lo..hi {
                                wacc += grow[ox] * xr[ox * stride + kx - pad];
                            }
                        }
                        if need_dx {
                            let dxr = &mut dx[ci * h * wd + row..ci * h * wd + row + wd];
                            for ox in lo..hi {
                                dxr[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                    if need_dw {
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }

    (
        need_dx.then(|| Tensor::from_vec(x.shape(), dx)),
        need_dw.then(|| Tensor::from_vec(w.shape(), dw)),
        need_dw.then(|| Tensor::from_vec(&[cout], db)),
    )
}

fn group_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cg, hw) = (c / groups, h * w);
    let n = (cg * hw) as f64;
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![0.0; c * hw];
    for g in 0..groups {
        let seg = &xd[g * cg * hw..(g + 1) * cg * hw];
        let mean = seg.iter().sum::<f64>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        for lc in 0..cg {
            let ch = g * cg + lc;
            let (ga, be) = (gd[ch], bd[ch]);
            for p in 0..hw {
                let xv = xd[ch * hw + p];
                out[ch * hw + p] = ga * (xv - mean) * istd + be;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    gy: &Tensor,
    groups: usize,
    eps: f64,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cg, hw) = (c / groups, h * w);
    let n = (cg * hw) as f64;
    let (xd, gd, gyd) = (x.data(), gamma.data(), gy.data());
    let mut dx = if need_dx { vec![0.0; c * hw] } else { Vec::new() };
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for g in 0..groups {
        let seg = &xd[g * cg * hw..(g + 1) * cg * hw];
        let mean = seg.iter().sum::<f64>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();

        // Accumulate the two reductions the input gradient needs, plus the
        // affine gradients, in one pass.
        let mut s1 = 0.0; // sum of dxhat
        let mut s2 = 0.0; // sum of dxhat * xhat
        for lc in 0..cg {
            let ch = g * cg + lc;
            for p in 0..hw {
                let xhat = (xd[ch * hw + p] - mean) * istd;
                let gyv = gyd[ch * hw + p];
                dgamma[ch] += gyv * xhat;
                dbeta[ch] += gyv;
                let dxhat = gyv * gd[ch];
                s1 += dxhat;
                s2 += dxhat * xhat;
            }
        }
        if need_dx {
            for lc in 0..cg {
                let ch = g * cg + lc;
                for p in 0..hw {
                    let xhat = (xd[ch * hw + p] - mean) * istd;
                    let dxhat = gyd[ch * hw + p] * gd[ch];
                    dx[ch * hw + p] = istd * (dxhat - s1 / n - xhat * s2 / n);
                }
            }
        }
    }
    (
        need_dx.then(|| Tensor::from_vec(x.shape(), dx)),
        Tensor::from_vec(&[c], dgamma),
        Tensor::from_vec(&[c], dbeta),
    )
}

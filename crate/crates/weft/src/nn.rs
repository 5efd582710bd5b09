//! Named parameters, deterministic initialization, and layer primitives.
//!
//! Every weight lives in a [`ParamSet`] under a dotted path like
//! `denoiser.enc1.attn.self_q.w`. Paths drive initialization seeds, stage
//! freezing, checksums, and checkpoint layout, so the same config always
//! produces the same bytes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WeftError};
use crate::tensor::{derive_seed, fnv1a64, Graph, Tensor, Var};

/// Stable handle to a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PRef(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<PRef> {
        if self.index.contains_key(name) {
            return Err(WeftError::Config(format!("duplicate parameter {name}")));
        }
        let idx = self.params.len();
        self.params.push(Param { name: name.to_string(), value, trainable: false });
        self.index.insert(name.to_string(), idx);
        Ok(PRef(idx))
    }

    pub fn pref(&self, name: &str) -> Result<PRef> {
        self.index
            .get(name)
            .map(|&i| PRef(i))
            .ok_or_else(|| WeftError::Config(format!("unknown parameter {name}")))
    }

    pub fn name(&self, p: PRef) -> &str {
        &self.params[p.0].name
    }

    pub fn value(&self, p: PRef) -> &Tensor {
        &self.params[p.0].value
    }

    pub fn value_by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.pref(name)?))
    }

    /// Replaces a parameter value; the shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.pref(name)?;
        if self.params[p.0].value.shape() != value.shape() {
            return Err(WeftError::ShapeMismatch {
                expected: format!("{:?}", self.params[p.0].value.shape()),
                got: format!("{:?}", value.shape()),
            });
        }
        self.params[p.0].value = value;
        Ok(())
    }

    /// Applies an in-place update to one parameter, snapping to the f32 grid
    /// afterwards so checkpoints round-trip losslessly.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut Tensor)) -> Result<()> {
        let p = self.pref(name)?;
        f(&mut self.params[p.0].value);
        self.params[p.0].value.round_to_f32();
        Ok(())
    }

    /// Sets the trainable flag from a predicate over parameter names.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.params[self.pref(name)?.0].trainable)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect();
        names.sort();
        names
    }

    /// Iterates parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Parameter names sorted lexicographically.
    pub fn sorted_names(&self) -> Vec<String> {
        self.index.keys().cloned().collect()
    }

    /// FNV hash of name, shape, and raw bytes of every parameter whose path
    /// starts with `prefix`, visited in sorted order. Any single-bit change
    /// to a covered value changes the result.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut bytes = Vec::new();
        for (name, &idx) in &self.index {
            if !name.starts_with(prefix) {
                continue;
            }
            bytes.extend_from_slice(name.as_bytes());
            for &d in self.params[idx].value.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in self.params[idx].value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Creates one graph leaf per parameter; trainable parameters request
    /// gradients. Call once per graph before any layer forward.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), p.trainable))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for one [`ParamSet::bind`] call.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, p: PRef) -> Var {
        self.vars[p.0]
    }
}

/// Gradients of trainable parameters after a backward pass, keyed by name.
pub fn collect_grads(g: &Graph, set: &ParamSet, bound: &Bound) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (idx, p) in set.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        if let Some(grad) = g.grad(bound.vars[idx]) {
            out.insert(p.name.clone(), grad.clone());
        }
    }
    out
}

/// Registers parameters under a common prefix with path-seeded init.
pub struct Init<'a> {
    pub set: &'a mut ParamSet,
    pub prefix: String,
    pub seed: u64,
}

impl<'a> Init<'a> {
    pub fn new(set: &'a mut ParamSet, prefix: &str, seed: u64) -> Self {
        Init { set, prefix: prefix.to_string(), seed }
    }

    fn path(&self, rel: &str) -> String {
        format!("{}{}", self.prefix, rel)
    }

    fn randn(&self, path: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, path));
        let mut t = Tensor::randn(shape, &mut rng);
        for v in t.data_mut() {
            *v *= std;
        }
        t.round_to_f32();
        t
    }

    /// 3x3-style convolution with He-scaled weights and zero bias.
    pub fn conv(
        &mut self,
        rel: &str,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Conv2dLayer> {
        let path = self.path(rel);
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = self.randn(&format!("{path}.w"), &[cout, cin, k, k], std);
        let wref = self.set.register(&format!("{path}.w"), w)?;
        let bref = self.set.register(&format!("{path}.b"), Tensor::zeros(&[cout]))?;
        Ok(Conv2dLayer { w: wref, b: bref, stride, pad })
    }

    /// Convolution whose weights and bias start at exactly zero.
    pub fn conv_zero(
        &mut self,
        rel: &str,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Conv2dLayer> {
        let path = self.path(rel);
        let wref = self.set.register(&format!("{path}.w"), Tensor::zeros(&[cout, cin, k, k]))?;
        let bref = self.set.register(&format!("{path}.b"), Tensor::zeros(&[cout]))?;
        Ok(Conv2dLayer { w: wref, b: bref, stride, pad })
    }

    /// Fully connected layer with 1/sqrt(n_in) weights and zero bias.
    pub fn dense(&mut self, rel: &str, nout: usize, nin: usize) -> Result<DenseLayer> {
        let path = self.path(rel);
        let std = (1.0 / nin as f64).sqrt();
        let w = self.randn(&format!("{path}.w"), &[nout, nin], std);
        let wref = self.set.register(&format!("{path}.w"), w)?;
        let bref = self.set.register(&format!("{path}.b"), Tensor::zeros(&[nout]))?;
        Ok(DenseLayer { w: wref, b: bref })
    }

    /// Group normalization with identity affine.
    pub fn norm(&mut self, rel: &str, channels: usize, groups: usize) -> Result<NormLayer> {
        let path = self.path(rel);
        let gamma = self.set.register(&format!("{path}.g"), Tensor::full(&[channels], 1.0))?;
        let beta = self.set.register(&format!("{path}.b"), Tensor::zeros(&[channels]))?;
        Ok(NormLayer { gamma, beta, groups })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dLayer {
    pub w: PRef,
    pub b: PRef,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn forward(&self, g: &mut Graph, bnd: &Bound, x: Var) -> Var {
        g.conv2d(x, bnd.var(self.w), bnd.var(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseLayer {
    pub w: PRef,
    pub b: PRef,
}

impl DenseLayer {
    pub fn forward(&self, g: &mut Graph, bnd: &Bound, x: Var) -> Var {
        g.linear(x, bnd.var(self.w), bnd.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormLayer {
    pub gamma: PRef,
    pub beta: PRef,
    pub groups: usize,
}

impl NormLayer {
    pub fn forward(&self, g: &mut Graph, bnd: &Bound, x: Var) -> Var {
        g.group_norm(x, bnd.var(self.gamma), bnd.var(self.beta), self.groups)
    }
}

/// Scaled dot-product attention inside the graph: `softmax(QK^T/sqrt(d)) V`.
pub fn graph_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Var {
    let d = g.val(q).shape()[1];
    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let p = g.softmax_rows(scaled);
    g.matmul(p, v)
}

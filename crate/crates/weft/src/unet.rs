//! Miniature latent-space denoiser with injectable attention sites.
//!
//! The backbone is a small UNet: a stem conv, `depth` encoder levels (each a
//! strided downsample, a residual block, and an attention block), a mid
//! residual block, and a mirrored decoder with skip connections. Every
//! encoder attention block is a named site that can consume externally
//! computed garment keys and values, either additively or by sequence
//! concatenation. Decoder skips and the mid feature accept additive control
//! residuals under stable site names.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::nn::{graph_attention, Bound, Conv2dLayer, DenseLayer, Init, NormLayer, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::TextEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "snake_case")]
pub struct UNetConfig {
    /// Channels of the latent the denoiser consumes and predicts.
    pub latent_channels: usize,
    /// Channel width at full latent resolution; doubles per level.
    pub base_channels: usize,
    /// Number of downsampling levels, each with one attention site.
    pub depth: usize,
    /// Token width of text embeddings consumed by cross-attention.
    pub text_dim: usize,
    /// Width of the sinusoidal timestep embedding and its MLP.
    pub time_dim: usize,
    /// Groups for all group normalization layers.
    pub groups: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            latent_channels: 3,
            base_channels: 16,
            depth: 2,
            text_dim: 16,
            time_dim: 32,
            groups: 8,
            init_seed: 0xC0FFEE,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(WeftError::Config("depth must be at least 1".into()));
        }
        if self.base_channels == 0 || self.base_channels % self.groups != 0 {
            return Err(WeftError::Config(format!(
                "base_channels {} must be a positive multiple of groups {}",
                self.base_channels, self.groups
            )));
        }
        if self.latent_channels == 0 || self.text_dim == 0 {
            return Err(WeftError::Config("latent_channels and text_dim must be positive".into()));
        }
        if self.time_dim < 4 || self.time_dim % 2 != 0 {
            return Err(WeftError::Config("time_dim must be an even number >= 4".into()));
        }
        Ok(())
    }

    /// Channel width at level `i` (level 0 is full resolution).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Names of the attention sites, outermost first.
    pub fn attention_sites(&self) -> Vec<String> {
        (1..=self.depth).map(|i| format!("attn{i}")).collect()
    }

    /// Names of the control residual sites: one per decoder skip plus `mid`.
    pub fn residual_sites(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.depth).map(|i| format!("skip{i}")).collect();
        v.push("mid".to_string());
        v
    }
}

/// How garment keys and values enter self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Ignore garment keys and values entirely.
    None,
    /// Add a separate attention readout over garment keys (additive mixing).
    Asa,
    /// Concatenate garment keys and values into the sequence.
    Csa,
}

impl std::str::FromStr for AttentionMode {
    type Err = WeftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AttentionMode::None),
            "asa" | "additive" => Ok(AttentionMode::Asa),
            "csa" | "concat" => Ok(AttentionMode::Csa),
            other => Err(WeftError::Config(format!("unknown attention mode {other}"))),
        }
    }
}

/// Keys and values captured at one attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteKV {
    pub site: String,
    pub k: Tensor,
    pub v: Tensor,
}

/// Garment conditioning for every attention site, in site order.
#[derive(Debug, Clone, PartialEq)]
pub struct GarmentKV {
    pub sites: Vec<SiteKV>,
    /// Timestep the garment encoder ran at when producing these.
    pub timestep: usize,
}

impl GarmentKV {
    pub fn site(&self, name: &str) -> Option<&SiteKV> {
        self.sites.iter().find(|s| s.site == name)
    }
}

/// A [`GarmentKV`] plus the mixing mode and additive branch scale.
#[derive(Debug, Clone)]
pub struct InjectionSet {
    pub kv: GarmentKV,
    pub mode: AttentionMode,
    pub scale: f64,
}

/// Additive features keyed by residual site name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlResiduals {
    pub sites: Vec<(String, Tensor)>,
}

impl ControlResiduals {
    pub fn site(&self, name: &str) -> Option<&Tensor> {
        self.sites.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Multiplies every residual, used to probe additivity.
    pub fn scaled(&self, c: f64) -> ControlResiduals {
        ControlResiduals {
            sites: self
                .sites
                .iter()
                .map(|(n, t)| {
                    let data = t.data().iter().map(|&v| v * c).collect();
                    (n.clone(), Tensor::from_vec(t.shape(), data))
                })
                .collect(),
        }
    }
}

/// Garment keys and values already living on a graph, so gradients can flow
/// back into whatever produced them.
#[derive(Debug, Clone)]
pub struct GraphInjection {
    pub sites: Vec<(String, Var, Var)>,
    pub mode: AttentionMode,
    pub scale: f64,
}

impl GraphInjection {
    /// Lifts tensor-level garment conditioning onto a graph as constants.
    pub fn lift(g: &mut Graph, set: &InjectionSet) -> GraphInjection {
        GraphInjection {
            sites: set
                .kv
                .sites
                .iter()
                .map(|s| (s.site.clone(), g.constant(s.k.clone()), g.constant(s.v.clone())))
                .collect(),
            mode: set.mode,
            scale: set.scale,
        }
    }

    pub fn site(&self, name: &str) -> Option<(Var, Var)> {
        self.sites.iter().find(|(n, _, _)| n == name).map(|(_, k, v)| (*k, *v))
    }
}

/// Control residuals already living on a graph.
#[derive(Debug, Clone, Default)]
pub struct GraphResiduals {
    pub sites: Vec<(String, Var)>,
}

impl GraphResiduals {
    pub fn lift(g: &mut Graph, r: &ControlResiduals) -> GraphResiduals {
        GraphResiduals {
            sites: r.sites.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))).collect(),
        }
    }

    pub fn site(&self, name: &str) -> Option<Var> {
        self.sites.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Sinusoidal features for an integer timestep, shaped `[1, dim]`.
pub fn time_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for j in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let omega = (-(10000f64.ln()) * j as f64 / denom).exp();
        data[j] = (t as f64 * omega).sin();
        data[half + j] = (t as f64 * omega).cos();
    }
    Tensor::from_vec(&[1, dim], data)
}

#[derive(Debug, Clone)]
pub struct TimeMlp {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub dim: usize,
}

impl TimeMlp {
    pub(crate) fn build(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(TimeMlp {
            fc1: init.dense("time.fc1", dim, dim)?,
            fc2: init.dense("time.fc2", dim, dim)?,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, bnd: &Bound, t: usize) -> Var {
        let feats = g.constant(time_features(t, self.dim));
        let h = self.fc1.forward(g, bnd, feats);
        let h = g.silu(h);
        self.fc2.forward(g, bnd, h)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: NormLayer,
    pub conv1: Conv2dLayer,
    pub time_proj: DenseLayer,
    pub norm2: NormLayer,
    pub conv2: Conv2dLayer,
    channels: usize,
}

impl ResBlock {
    pub(crate) fn build(init: &mut Init, rel: &str, channels: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: init.norm(&format!("{rel}.norm1"), channels, groups)?,
            conv1: init.conv(&format!("{rel}.conv1"), channels, channels, 3, 1, 1)?,
            time_proj: init.dense(&format!("{rel}.time"), channels, time_dim)?,
            norm2: init.norm(&format!("{rel}.norm2"), channels, groups)?,
            conv2: init.conv(&format!("{rel}.conv2"), channels, channels, 3, 1, 1)?,
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, bnd: &Bound, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, bnd, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, bnd, h);
        let tb = self.time_proj.forward(g, bnd, temb);
        let tb = g.reshape(tb, &[self.channels]);
        h = g.add_channel_bias(h, tb);
        let h2 = self.norm2.forward(g, bnd, h);
        let h2 = g.silu(h2);
        let h2 = self.conv2.forward(g, bnd, h2);
        g.add(x, h2)
    }
}

/// Garment keys and values lifted into a graph for one site.
pub(crate) struct SiteInjectionVars {
    pub(crate) k: Var,
    pub(crate) v: Var,
    pub(crate) mode: AttentionMode,
    pub(crate) scale: f64,
}

#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub norm_self: NormLayer,
    pub q: DenseLayer,
    pub k: DenseLayer,
    pub v: DenseLayer,
    pub o: DenseLayer,
    pub norm_cross: NormLayer,
    pub cq: DenseLayer,
    pub ck: DenseLayer,
    pub cv: DenseLayer,
    pub co: DenseLayer,
}

pub struct AttnOut {
    pub x: Var,
    /// Self-attention keys from this block's own projection, `[tokens, d]`.
    pub k: Var,
    /// Matching values.
    pub v: Var,
}

impl AttnBlock {
    pub(crate) fn build(init: &mut Init, rel: &str, channels: usize, text_dim: usize, groups: usize) -> Result<Self> {
        Ok(AttnBlock {
            norm_self: init.norm(&format!("{rel}.norm_s"), channels, groups)?,
            q: init.dense(&format!("{rel}.self_q"), channels, channels)?,
            k: init.dense(&format!("{rel}.self_k"), channels, channels)?,
            v: init.dense(&format!("{rel}.self_v"), channels, channels)?,
            o: init.dense(&format!("{rel}.self_o"), channels, channels)?,
            norm_cross: init.norm(&format!("{rel}.norm_x"), channels, groups)?,
            cq: init.dense(&format!("{rel}.cross_q"), channels, channels)?,
            ck: init.dense(&format!("{rel}.cross_k"), channels, text_dim)?,
            cv: init.dense(&format!("{rel}.cross_v"), channels, text_dim)?,
            co: init.dense(&format!("{rel}.cross_o"), channels, channels)?,
        })
    }

    /// Builds only the pieces a garment tap needs: the pre-attention norm and
    /// the key/value projections, under the same relative paths.
    pub(crate) fn build_tap(init: &mut Init, rel: &str, channels: usize, groups: usize) -> Result<AttnTap> {
        Ok(AttnTap {
            norm_self: init.norm(&format!("{rel}.norm_s"), channels, groups)?,
            k: init.dense(&format!("{rel}.self_k"), channels, channels)?,
            v: init.dense(&format!("{rel}.self_v"), channels, channels)?,
        })
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        bnd: &Bound,
        x: Var,
        text: Var,
        inj: Option<&SiteInjectionVars>,
    ) -> AttnOut {
        let shape = g.val(x).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);

        let n = self.norm_self.forward(g, bnd, x);
        let tok = g.to_tokens(n);
        let q = self.q.forward(g, bnd, tok);
        let k = self.k.forward(g, bnd, tok);
        let v = self.v.forward(g, bnd, tok);
        let attn = match inj {
            Some(s) if s.mode == AttentionMode::Asa => {
                let own = graph_attention(g, q, k, v);
                let garment = graph_attention(g, q, s.k, s.v);
                let scaled = g.scale(garment, s.scale);
                g.add(own, scaled)
            }
            Some(s) if s.mode == AttentionMode::Csa => {
                let kk = g.concat_rows(k, s.k);
                let vv = g.concat_rows(v, s.v);
                graph_attention(g, q, kk, vv)
            }
            _ => graph_attention(g, q, k, v),
        };
        let o = self.o.forward(g, bnd, attn);
        let back = g.from_tokens(o, c, h, w);
        let x = g.add(x, back);

        let n2 = self.norm_cross.forward(g, bnd, x);
        let tok2 = g.to_tokens(n2);
        let q2 = self.cq.forward(g, bnd, tok2);
        let k2 = self.ck.forward(g, bnd, text);
        let v2 = self.cv.forward(g, bnd, text);
        let at2 = graph_attention(g, q2, k2, v2);
        let o2 = self.co.forward(g, bnd, at2);
        let back2 = g.from_tokens(o2, c, h, w);
        let out = g.add(x, back2);

        AttnOut { x: out, k, v }
    }
}

/// Reduced attention block for garment key/value capture.
#[derive(Debug, Clone)]
pub struct AttnTap {
    pub norm_self: NormLayer,
    pub k: DenseLayer,
    pub v: DenseLayer,
}

impl AttnTap {
    pub fn forward(&self, g: &mut Graph, bnd: &Bound, x: Var) -> (Var, Var) {
        let n = self.norm_self.forward(g, bnd, x);
        let tok = g.to_tokens(n);
        let k = self.k.forward(g, bnd, tok);
        let v = self.v.forward(g, bnd, tok);
        (k, v)
    }
}

#[derive(Debug, Clone)]
pub struct EncLevel {
    pub down: Conv2dLayer,
    pub res: ResBlock,
    pub attn: AttnBlock,
}

#[derive(Debug, Clone)]
pub struct DecLevel {
    pub reduce: Conv2dLayer,
    pub fuse: Conv2dLayer,
    pub res: ResBlock,
}

/// The denoiser. Parameters live in an external [`ParamSet`] under the
/// prefix passed to [`MiniUnet::build`].
#[derive(Debug, Clone)]
pub struct MiniUnet {
    cfg: UNetConfig,
    pub stem: Conv2dLayer,
    pub enc: Vec<EncLevel>,
    pub mid: ResBlock,
    pub dec: Vec<DecLevel>,
    pub head_norm: NormLayer,
    pub head: Conv2dLayer,
    pub time: TimeMlp,
    prefix: String,
}

/// Encoder trunk builder shared by the denoiser and its derived copies.
pub(crate) fn build_encoder_levels(
    init: &mut Init,
    cfg: &UNetConfig,
    depth: usize,
) -> Result<Vec<EncLevel>> {
    let mut enc = Vec::with_capacity(depth);
    for i in 1..=depth {
        let cin = cfg.width(i - 1);
        let cout = cfg.width(i);
        enc.push(EncLevel {
            down: init.conv(&format!("enc{i}.down"), cout, cin, 3, 2, 1)?,
            res: ResBlock::build(init, &format!("enc{i}.res"), cout, cfg.time_dim, cfg.groups)?,
            attn: AttnBlock::build(init, &format!("enc{i}.attn"), cout, cfg.text_dim, cfg.groups)?,
        });
    }
    Ok(enc)
}

impl MiniUnet {
    /// Registers all denoiser parameters under `prefix` and returns the
    /// wired-up model.
    pub fn build(set: &mut ParamSet, prefix: &str, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(set, prefix, cfg.init_seed);
        let stem = init.conv("stem", cfg.base_channels, cfg.latent_channels, 3, 1, 1)?;
        let time = TimeMlp::build(&mut init, cfg.time_dim)?;
        let enc = build_encoder_levels(&mut init, cfg, cfg.depth)?;
        let mid = ResBlock::build(&mut init, "mid", cfg.width(cfg.depth), cfg.time_dim, cfg.groups)?;
        let mut dec = Vec::with_capacity(cfg.depth);
        for i in (1..=cfg.depth).rev() {
            let cin = cfg.width(i);
            let cout = cfg.width(i - 1);
            dec.push(DecLevel {
                reduce: init.conv(&format!("dec{i}.reduce"), cout, cin, 3, 1, 1)?,
                fuse: init.conv(&format!("dec{i}.fuse"), cout, cin, 3, 1, 1)?,
                res: ResBlock::build(&mut init, &format!("dec{i}.res"), cout, cfg.time_dim, cfg.groups)?,
            });
        }
        let head_norm = init.norm("head_norm", cfg.base_channels, cfg.groups)?;
        let head = init.conv("head", cfg.latent_channels, cfg.base_channels, 3, 1, 1)?;
        Ok(MiniUnet {
            cfg: *cfg,
            stem,
            enc,
            mid,
            dec,
            head_norm,
            head,
            time,
            prefix: prefix.to_string(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 3 || x.shape()[0] != self.cfg.latent_channels {
            return Err(WeftError::ShapeMismatch {
                expected: format!("[{}, H, W]", self.cfg.latent_channels),
                got: format!("{:?}", x.shape()),
            });
        }
        let div = 1 << self.cfg.depth;
        if x.shape()[1] % div != 0 || x.shape()[2] % div != 0 || x.shape()[1] < div {
            return Err(WeftError::ShapeMismatch {
                expected: format!("spatial dims divisible by {div}"),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    fn check_injection(&self, g: &Graph, inj: &GraphInjection) -> Result<()> {
        if inj.mode == AttentionMode::None {
            return Ok(());
        }
        let known = self.cfg.attention_sites();
        for (name, _, _) in &inj.sites {
            if !known.contains(name) {
                return Err(WeftError::UnknownSite(name.clone()));
            }
        }
        for (i, name) in known.iter().enumerate() {
            let (k, v) = inj
                .site(name)
                .ok_or_else(|| WeftError::Injection(format!("missing garment K/V for site {name}")))?;
            let (ks, vs) = (g.val(k).shape(), g.val(v).shape());
            let d = self.cfg.width(i + 1);
            if ks.len() != 2 || ks[1] != d {
                return Err(WeftError::Injection(format!(
                    "site {name} expects keys [*, {d}], got {ks:?}"
                )));
            }
            if ks != vs {
                return Err(WeftError::Injection(format!(
                    "site {name} key/value shape mismatch: {ks:?} vs {vs:?}"
                )));
            }
            if ks[0] == 0 {
                return Err(WeftError::Injection(format!("site {name} has an empty sequence")));
            }
        }
        Ok(())
    }

    /// Predicted noise for `x_t` at timestep `t`, on an existing graph.
    /// `inj` mixes garment keys/values into encoder self-attention;
    /// `residuals` adds control features to skips and mid. Both reference
    /// graph nodes, so upstream producers receive gradients.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bnd: &Bound,
        x: Var,
        t: usize,
        text: &TextEmbedding,
        inj: Option<&GraphInjection>,
        residuals: Option<&GraphResiduals>,
    ) -> Result<Var> {
        self.check_input(g.val(x))?;
        if text.dim() != self.cfg.text_dim {
            return Err(WeftError::ShapeMismatch {
                expected: format!("text dim {}", self.cfg.text_dim),
                got: format!("{}", text.dim()),
            });
        }
        if let Some(i) = inj {
            self.check_injection(g, i)?;
        }
        if let Some(r) = residuals {
            let known = self.cfg.residual_sites();
            for (n, _) in &r.sites {
                if !known.contains(n) {
                    return Err(WeftError::UnknownSite(n.clone()));
                }
            }
        }

        let text_var = g.constant(text.vectors.clone());
        let inj_vars: Vec<Option<SiteInjectionVars>> = match inj {
            Some(set) if set.mode != AttentionMode::None => self
                .cfg
                .attention_sites()
                .iter()
                .map(|name| {
                    let (k, v) = set.site(name).expect("validated above");
                    Some(SiteInjectionVars { k, v, mode: set.mode, scale: set.scale })
                })
                .collect(),
            _ => (0..self.cfg.depth).map(|_| None).collect(),
        };

        let residual_var = |g: &Graph, name: &str, want: &[usize]| -> Result<Option<Var>> {
            let Some(r) = residuals else { return Ok(None) };
            match r.site(name) {
                None => Ok(None),
                Some(v) => {
                    if g.val(v).shape() != want {
                        return Err(WeftError::Injection(format!(
                            "residual {name} expects {want:?}, got {:?}",
                            g.val(v).shape()
                        )));
                    }
                    Ok(Some(v))
                }
            }
        };

        let temb = self.time.forward(g, bnd, t);

        // Encoder.
        let mut skips: Vec<Var> = Vec::with_capacity(self.cfg.depth);
        let mut h = self.stem.forward(g, bnd, x);
        skips.push(h);
        for (idx, level) in self.enc.iter().enumerate() {
            h = level.down.forward(g, bnd, h);
            h = level.res.forward(g, bnd, h, temb);
            let out = level.attn.forward(g, bnd, h, text_var, inj_vars[idx].as_ref());
            h = out.x;
            if idx + 1 < self.cfg.depth {
                skips.push(h);
            }
        }

        // Mid plus control residual.
        let mut m = self.mid.forward(g, bnd, h, temb);
        let mid_shape = g.val(m).shape().to_vec();
        if let Some(r) = residual_var(g, "mid", &mid_shape)? {
            m = g.add(m, r);
        }

        // Decoder consumes skips deepest-first.
        let mut u = m;
        for (di, level) in self.dec.iter().enumerate() {
            let skip_idx = self.cfg.depth - 1 - di;
            u = g.nearest_up2(u);
            u = level.reduce.forward(g, bnd, u);
            let mut skip = skips[skip_idx];
            let name = format!("skip{skip_idx}");
            let skip_shape = g.val(skip).shape().to_vec();
            if let Some(r) = residual_var(g, &name, &skip_shape)? {
                skip = g.add(skip, r);
            }
            u = g.concat_channels(u, skip);
            u = level.fuse.forward(g, bnd, u);
            u = level.res.forward(g, bnd, u, temb);
        }

        let out = self.head_norm.forward(g, bnd, u);
        let out = g.silu(out);
        Ok(self.head.forward(g, bnd, out))
    }

    /// Pure convenience wrapper: fresh graph, no gradients, returns the
    /// predicted noise tensor.
    pub fn forward(
        &self,
        set: &ParamSet,
        x_t: &Tensor,
        t: usize,
        text: &TextEmbedding,
        inj: Option<&InjectionSet>,
        residuals: Option<&ControlResiduals>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bnd = set.bind(&mut g);
        let x = g.constant(x_t.clone());
        let gi = inj.map(|i| GraphInjection::lift(&mut g, i));
        let gr = residuals.map(|r| GraphResiduals::lift(&mut g, r));
        let out = self.forward_graph(&mut g, &bnd, x, t, text, gi.as_ref(), gr.as_ref())?;
        Ok(g.val(out).clone())
    }
}

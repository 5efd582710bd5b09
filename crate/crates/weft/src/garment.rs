//! Garment encoder: a trainable copy of the denoiser's encoder trunk that
//! captures self-attention keys and values at every attention site.
//!
//! The copy runs the same stem, downsampling, residual, and attention blocks
//! as the denoiser over the garment latent, with the garment prompt feeding
//! its cross-attention. At each site the keys and values come from the
//! copy's own projections applied to its own normalized features; at the
//! deepest site only the norm and key/value projections exist because
//! nothing consumes features past that tap. That keeps every parameter of
//! the encoder on the gradient path from the denoising loss.

use crate::error::{Result, WeftError};
use crate::nn::{Bound, Conv2dLayer, Init, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::TextEmbedding;
use crate::unet::{
    build_encoder_levels, AttnBlock, AttnTap, EncLevel, GarmentKV, ResBlock, SiteKV, TimeMlp,
    UNetConfig,
};

/// Keys and values for every attention site as graph nodes, site order.
pub type GraphKV = Vec<(String, Var, Var)>;

#[derive(Debug, Clone)]
pub struct GarmentEncoder {
    cfg: UNetConfig,
    stem: Conv2dLayer,
    time: TimeMlp,
    /// Full encoder levels 1..depth-1 (empty at depth 1).
    trunk: Vec<EncLevel>,
    last_down: Conv2dLayer,
    last_res: ResBlock,
    last_tap: AttnTap,
    prefix: String,
}

impl GarmentEncoder {
    /// Registers encoder parameters under `prefix`. Relative paths mirror the
    /// denoiser's so weights can be copied suffix-for-suffix.
    pub fn build(set: &mut ParamSet, prefix: &str, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(set, prefix, cfg.init_seed);
        let stem = init.conv("stem", cfg.base_channels, cfg.latent_channels, 3, 1, 1)?;
        let time = TimeMlp::build(&mut init, cfg.time_dim)?;
        let trunk = build_encoder_levels(&mut init, cfg, cfg.depth - 1)?;
        let d = cfg.depth;
        let last_down =
            init.conv(&format!("enc{d}.down"), cfg.width(d), cfg.width(d - 1), 3, 2, 1)?;
        let last_res =
            ResBlock::build(&mut init, &format!("enc{d}.res"), cfg.width(d), cfg.time_dim, cfg.groups)?;
        let last_tap = AttnBlock::build_tap(&mut init, &format!("enc{d}.attn"), cfg.width(d), cfg.groups)?;
        Ok(GarmentEncoder {
            cfg: *cfg,
            stem,
            time,
            trunk,
            last_down,
            last_res,
            last_tap,
            prefix: prefix.to_string(),
        })
    }

    /// Builds the encoder and initializes every parameter from the denoiser
    /// parameter with the same relative path.
    pub fn from_denoiser(
        set: &mut ParamSet,
        prefix: &str,
        denoiser_prefix: &str,
        cfg: &UNetConfig,
    ) -> Result<Self> {
        let enc = Self::build(set, prefix, cfg)?;
        copy_params_by_suffix(set, prefix, denoiser_prefix)?;
        Ok(enc)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Captures keys and values at every site on an existing graph so that
    /// gradients reach the encoder's parameters.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        bnd: &Bound,
        garment_latent: Var,
        prompt: &TextEmbedding,
        t: usize,
    ) -> Result<GraphKV> {
        let shape = g.val(garment_latent).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.latent_channels {
            return Err(WeftError::ShapeMismatch {
                expected: format!("[{}, H, W]", self.cfg.latent_channels),
                got: format!("{shape:?}"),
            });
        }
        let div = 1 << self.cfg.depth;
        if shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(WeftError::ShapeMismatch {
                expected: format!("spatial dims divisible by {div}"),
                got: format!("{shape:?}"),
            });
        }
        if prompt.dim() != self.cfg.text_dim {
            return Err(WeftError::ShapeMismatch {
                expected: format!("text dim {}", self.cfg.text_dim),
                got: format!("{}", prompt.dim()),
            });
        }

        let text_var = g.constant(prompt.vectors.clone());
        let temb = self.time.forward(g, bnd, t);
        let mut out: GraphKV = Vec::with_capacity(self.cfg.depth);

        let mut h = self.stem.forward(g, bnd, garment_latent);
        for (idx, level) in self.trunk.iter().enumerate() {
            h = level.down.forward(g, bnd, h);
            h = level.res.forward(g, bnd, h, temb);
            let attn = level.attn.forward(g, bnd, h, text_var, None);
            out.push((format!("attn{}", idx + 1), attn.k, attn.v));
            h = attn.x;
        }
        h = self.last_down.forward(g, bnd, h);
        h = self.last_res.forward(g, bnd, h, temb);
        let (k, v) = self.last_tap.forward(g, bnd, h);
        out.push((format!("attn{}", self.cfg.depth), k, v));
        Ok(out)
    }

    /// Pure wrapper returning captured keys and values as tensors.
    pub fn encode(
        &self,
        set: &ParamSet,
        garment_latent: &Tensor,
        prompt: &TextEmbedding,
        t: usize,
    ) -> Result<GarmentKV> {
        let mut g = Graph::new();
        let bnd = set.bind(&mut g);
        let x = g.constant(garment_latent.clone());
        let kv = self.encode_graph(&mut g, &bnd, x, prompt, t)?;
        Ok(GarmentKV {
            sites: kv
                .into_iter()
                .map(|(site, k, v)| SiteKV { site, k: g.val(k).clone(), v: g.val(v).clone() })
                .collect(),
            timestep: t,
        })
    }
}

/// Copies every parameter under `dst_prefix` from the parameter with the same
/// relative path under `src_prefix`. Shapes must match exactly.
pub fn copy_params_by_suffix(set: &mut ParamSet, dst_prefix: &str, src_prefix: &str) -> Result<()> {
    let dst_names: Vec<String> = set
        .sorted_names()
        .into_iter()
        .filter(|n| n.starts_with(dst_prefix))
        .collect();
    if dst_names.is_empty() {
        return Err(WeftError::Config(format!("no parameters under prefix {dst_prefix}")));
    }
    for name in dst_names {
        let suffix = &name[dst_prefix.len()..];
        let src = format!("{src_prefix}{suffix}");
        let value = set.value_by_name(&src)?.clone();
        set.set_value(&name, value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::collect_grads;
    use crate::text::HashedTextEmbedder;
    use crate::unet::{AttentionMode, GraphInjection, MiniUnet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamSet, MiniUnet, GarmentEncoder, UNetConfig) {
        let cfg = UNetConfig::default();
        let mut set = ParamSet::new();
        let unet = MiniUnet::build(&mut set, "denoiser.", &cfg).unwrap();
        let enc = GarmentEncoder::from_denoiser(&mut set, "garment.", "denoiser.", &cfg).unwrap();
        (set, unet, enc, cfg)
    }

    #[test]
    fn construction_copies_denoiser_weights() {
        let (set, _, _, _) = setup();
        for name in set.sorted_names() {
            if let Some(suffix) = name.strip_prefix("garment.") {
                let src = format!("denoiser.{suffix}");
                assert_eq!(
                    set.value_by_name(&name).unwrap(),
                    set.value_by_name(&src).unwrap(),
                    "{name} must start as an exact copy"
                );
            }
        }
    }

    #[test]
    fn encode_produces_all_sites_with_expected_shapes() {
        let (set, _, enc, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let prompt = HashedTextEmbedder::default().embed("a plaid jacket");
        let kv = enc.encode(&set, &z, &prompt, 13).unwrap();
        assert_eq!(kv.timestep, 13);
        let names: Vec<&str> = kv.sites.iter().map(|s| s.site.as_str()).collect();
        assert_eq!(names, vec!["attn1", "attn2"]);
        assert_eq!(kv.sites[0].k.shape(), &[16, cfg.width(1)]);
        assert_eq!(kv.sites[1].k.shape(), &[4, cfg.width(2)]);
        for s in &kv.sites {
            assert_eq!(s.k.shape(), s.v.shape());
        }
    }

    #[test]
    fn encode_is_pure_and_timestep_sensitive() {
        let (set, _, enc, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let prompt = HashedTextEmbedder::default().embed("shirt");
        let a = enc.encode(&set, &z, &prompt, 5).unwrap();
        let b = enc.encode(&set, &z, &prompt, 5).unwrap();
        assert_eq!(a.sites[0].k, b.sites[0].k);
        assert_eq!(a.sites[1].v, b.sites[1].v);
        let c = enc.encode(&set, &z, &prompt, 90).unwrap();
        assert!(a.sites[0].k.max_abs_diff(&c.sites[0].k) > 1e-9);
    }

    #[test]
    fn prompt_reaches_deeper_sites_through_cross_attention() {
        let (set, _, enc, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let e = HashedTextEmbedder::default();
        let a = enc.encode(&set, &z, &e.embed("a red shirt"), 6).unwrap();
        let b = enc.encode(&set, &z, &e.embed("a green coat"), 6).unwrap();
        // Site 1 keys are captured before the first cross-attention runs.
        assert_eq!(a.sites[0].k, b.sites[0].k);
        // Site 2 features have passed through level-1 cross-attention.
        assert!(a.sites[1].k.max_abs_diff(&b.sites[1].k) > 1e-9);
    }

    #[test]
    fn captured_kv_drives_the_denoiser() {
        let (set, unet, enc, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z_g = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let x = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let e = HashedTextEmbedder::default();
        let kv = enc.encode(&set, &z_g, &e.embed("denim vest"), 7).unwrap();
        let base = unet.forward(&set, &x, 7, &e.embed("a person"), None, None).unwrap();
        let inj = crate::unet::InjectionSet { kv, mode: AttentionMode::Asa, scale: 1.0 };
        let with = unet.forward(&set, &x, 7, &e.embed("a person"), Some(&inj), None).unwrap();
        assert!(with.max_abs_diff(&base) > 1e-9);
    }

    #[test]
    fn joint_graph_gives_every_garment_param_a_nonzero_grad() {
        let (mut set, unet, enc, cfg) = setup();
        set.set_trainable_where(|n| n.starts_with("garment."));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z_g = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let x = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let target = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let e = HashedTextEmbedder::default();

        let mut g = Graph::new();
        let bnd = set.bind(&mut g);
        let zg = g.constant(z_g);
        let kv = enc.encode_graph(&mut g, &bnd, zg, &e.embed("a wool sweater"), 9).unwrap();
        let inj = GraphInjection { sites: kv, mode: AttentionMode::Asa, scale: 1.0 };
        let xv = g.constant(x);
        let out = unet
            .forward_graph(&mut g, &bnd, xv, 9, &e.embed("a person posing"), Some(&inj), None)
            .unwrap();
        let tv = g.constant(target);
        let loss = g.mse(out, tv);
        g.backward(loss).unwrap();

        let grads = collect_grads(&g, &set, &bnd);
        let garment_param_count =
            set.sorted_names().iter().filter(|n| n.starts_with("garment.")).count();
        assert_eq!(grads.len(), garment_param_count, "every garment param needs a grad");
        for (name, grad) in &grads {
            assert!(name.starts_with("garment."));
            let maxabs = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(maxabs > 0.0, "{name} has an all-zero gradient");
        }
    }

    #[test]
    fn depth_one_encoder_works_without_cross_attention() {
        let cfg = UNetConfig { depth: 1, ..UNetConfig::default() };
        let mut set = ParamSet::new();
        MiniUnet::build(&mut set, "denoiser.", &cfg).unwrap();
        let enc = GarmentEncoder::from_denoiser(&mut set, "garment.", "denoiser.", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::randn(&[cfg.latent_channels, 8, 8], &mut rng);
        let kv = enc.encode(&set, &z, &HashedTextEmbedder::default().embed(""), 0).unwrap();
        assert_eq!(kv.sites.len(), 1);
        assert_eq!(kv.sites[0].k.shape(), &[16, cfg.width(1)]);
    }

    #[test]
    fn copy_rejects_missing_sources() {
        let mut set = ParamSet::new();
        set.register("dst.a", Tensor::zeros(&[2])).unwrap();
        assert!(copy_params_by_suffix(&mut set, "dst.", "src.").is_err());
        assert!(copy_params_by_suffix(&mut set, "nothing.", "src.").is_err());
    }
}

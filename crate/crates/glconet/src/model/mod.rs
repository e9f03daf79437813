//! Network assembly: the built-in conv encoder, per-level channel reduction,
//! the collaborative optimization levels, the coarse head and the adjacent
//! reverse decoder (with an FPN-style alternative kept wired for ablations).

mod decoder;
mod encoder;

pub use decoder::{reverse_attention, ArdLevelParams, FpnParams, HeadParams, UpsStack};
pub use encoder::EncoderParams;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{CosFlags, CosLevelParams, FusionMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::params::{Conv2dParams, ParamVisitor};
use crate::tensor::Tensor;

/// How 1-channel score maps are upsampled and channel-expanded inside the
/// decoder's cross-layer aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsMode {
    /// 1x1 conv to 4C channels + pixel shuffle r=2 per doubling.
    PixelShuffle,
    /// Bilinear resize followed by a 1x1 conv to C channels.
    Bilinear,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub channels: usize,
    pub scale_set: Vec<usize>,
    pub fusion: FusionMode,
    pub gpm: bool,
    pub lrm: bool,
    pub ghim: bool,
    pub ard: bool,
    pub mtb_head: bool,
    pub ups_mode: UpsMode,
    pub encoder_widths: [usize; 5],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 128,
            scale_set: vec![3, 5, 7],
            fusion: FusionMode::Add,
            gpm: true,
            lrm: true,
            ghim: true,
            ard: true,
            mtb_head: true,
            ups_mode: UpsMode::PixelShuffle,
            encoder_widths: [16, 32, 64, 128, 160],
        }
    }
}

impl ModelConfig {
    /// Small configuration for fast training and tractable gradient checks.
    pub fn desk(channels: usize) -> Self {
        let w = channels.max(4);
        ModelConfig {
            channels,
            encoder_widths: [w / 2, w / 2 + w / 4, w, w, w + w / 2],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || self.channels % 4 != 0 {
            return Err(Error::Config(format!("channels {} must be a positive multiple of 4", self.channels)));
        }
        if self.scale_set.is_empty() {
            return Err(Error::Config("scale_set must be nonempty".into()));
        }
        let mut seen = Vec::new();
        for &s in &self.scale_set {
            if ![3, 5, 7].contains(&s) {
                return Err(Error::Config(format!("scale {s} not in {{3,5,7}}")));
            }
            if seen.contains(&s) {
                return Err(Error::Config(format!("duplicate scale {s}")));
            }
            seen.push(s);
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    fn cos_flags(&self) -> CosFlags {
        CosFlags { gpm: self.gpm, lrm: self.lrm, ghim: self.ghim }
    }
}

/// Logit maps D2..D6, coarsest last.
#[derive(Debug)]
pub struct NetOutputs {
    pub d: [NodeId; 5],
}

impl NetOutputs {
    pub fn level(&self, level: usize) -> NodeId {
        debug_assert!((2..=6).contains(&level));
        self.d[level - 2]
    }
}

#[derive(Debug)]
pub struct GlcoNet {
    pub cfg: ModelConfig,
    encoder: EncoderParams,
    reduce: Vec<Conv2dParams>,
    cos: Vec<CosLevelParams>,
    head: HeadParams,
    ard: Option<Vec<ArdLevelParams>>,
    fpn: Option<FpnParams>,
}

impl GlcoNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let encoder = EncoderParams::new(cfg.encoder_widths, &mut rng);
        let reduce = cfg.encoder_widths[1..]
            .iter()
            .map(|&w| Conv2dParams::new(ConvSpec::same(w, c, 3), &mut rng))
            .collect();
        let cos = (2..=5)
            .map(|_| CosLevelParams::new(c, &cfg.scale_set, cfg.fusion, cfg.cos_flags(), &mut rng))
            .collect();
        let head = HeadParams::new(cfg.encoder_widths[4], c, &cfg.scale_set, cfg.mtb_head, &mut rng);
        let (ard, fpn) = if cfg.ard {
            let levels = vec![
                ArdLevelParams::new(c, 1, None, cfg.ups_mode, &mut rng),
                ArdLevelParams::new(c, 2, Some(2), cfg.ups_mode, &mut rng),
                ArdLevelParams::new(c, 2, Some(4), cfg.ups_mode, &mut rng),
                ArdLevelParams::new(c, 2, Some(4), cfg.ups_mode, &mut rng),
            ];
            (Some(levels), None)
        } else {
            (None, Some(FpnParams::new(c, &mut rng)))
        };
        Ok(GlcoNet { cfg: cfg.clone(), encoder, reduce, cos, head, ard, fpn })
    }

    pub fn forward(&self, g: &mut Graph, image: NodeId) -> Result<NetOutputs> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 {
            return Err(Error::dim("glconet_forward", format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input extent {h}x{w} must be divisible by 32")));
        }
        let stages = self.encoder.forward(g, "encoder", image)?;

        // E1 is produced but unused downstream.
        let mut reduced = Vec::with_capacity(4);
        for (li, &e) in stages[1..].iter().enumerate() {
            let r = self.reduce[li].forward(g, &format!("reduce.s{}", li + 2), e)?;
            reduced.push(g.gelu(r)?);
        }

        let mut fused = Vec::with_capacity(4);
        let mut global5 = None;
        let mut local5 = None;
        for (li, &er) in reduced.iter().enumerate() {
            let out = self.cos[li].forward(g, &format!("cos.s{}", li + 2), er)?;
            if li == 3 {
                global5 = out.global;
                local5 = out.local;
            }
            fused.push(out.fused);
        }

        // The head pairs raw E5 with the best available level-5 feature.
        let x5 = global5.or(local5).unwrap_or(reduced[3]);
        let d6 = self.head.forward(g, "decoder.head6", stages[4], x5)?;

        let (d5, d4, d3, d2) = if let Some(ard) = &self.ard {
            let d5 = ard[0].forward(g, "decoder.ard.l5", fused[3], d6, None)?;
            let d4 = ard[1].forward(g, "decoder.ard.l4", fused[2], d5, Some(d6))?;
            let d3 = ard[2].forward(g, "decoder.ard.l3", fused[1], d4, Some(d5))?;
            let d2 = ard[3].forward(g, "decoder.ard.l2", fused[0], d3, Some(d4))?;
            (d5, d4, d3, d2)
        } else {
            let fpn = self.fpn.as_ref().expect("one decoder is always wired");
            let ds = fpn.forward(g, "decoder.fpn", [fused[0], fused[1], fused[2], fused[3]])?;
            (ds[3], ds[2], ds[1], ds[0])
        };
        Ok(NetOutputs { d: [d2, d3, d4, d5, d6] })
    }

    /// Final prediction sigma(upsample(D2)) at input resolution, on a strict
    /// (verification-mode) graph.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = image.dims4()?;
        let mut g = Graph::new();
        let x = g.leaf(image.clone());
        let out = self.forward(&mut g, x)?;
        let up = g.upsample_bilinear(out.d[0], h, w)?;
        let p = g.sigmoid(up)?;
        Ok(g.value(p).clone())
    }

    /// All five logit maps plus the final prediction, for per-level dumps.
    pub fn predict_levels(&self, image: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let (_, _, h, w) = image.dims4()?;
        let mut g = Graph::new();
        let x = g.leaf(image.clone());
        let out = self.forward(&mut g, x)?;
        let up = g.upsample_bilinear(out.d[0], h, w)?;
        let p = g.sigmoid(up)?;
        let levels = out.d.iter().map(|&id| g.value(id).clone()).collect();
        Ok((levels, g.value(p).clone()))
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        self.encoder.visit("encoder", v);
        for (li, r) in self.reduce.iter_mut().enumerate() {
            r.visit(&format!("reduce.s{}", li + 2), v);
        }
        for (li, cos) in self.cos.iter_mut().enumerate() {
            cos.visit(&format!("cos.s{}", li + 2), v);
        }
        self.head.visit("decoder.head6", v);
        if let Some(ard) = &mut self.ard {
            for (i, level) in ard.iter_mut().enumerate() {
                level.visit(&format!("decoder.ard.l{}", 5 - i), v);
            }
        }
        if let Some(fpn) = &mut self.fpn {
            fpn.visit("decoder.fpn", v);
        }
    }

    /// Zero every learnable tensor (diagnostics: residual paths become
    /// identities and predictions collapse to 0.5).
    pub fn zero_params(&mut self) {
        self.visit(&mut |_: &str, t: &mut Tensor| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0usize;
        self.visit(&mut |_: &str, t: &mut Tensor| n += t.numel());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::test_util::rand_tensor;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: 8,
            scale_set: vec![3, 5],
            encoder_widths: [4, 6, 8, 10, 12],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_resolution_chain_at_64() {
        let net = GlcoNet::new(&tiny_cfg(), 1).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(rand_tensor(&[1, 3, 64, 64], 2));
        let out = net.forward(&mut g, img).unwrap();
        let expect = [16usize, 8, 4, 2, 2];
        for (i, &d) in out.d.iter().enumerate() {
            let shape = g.value(d).shape();
            assert_eq!(shape, &[1, 1, expect[i], expect[i]], "level {}", i + 2);
        }
    }

    #[test]
    fn paper_scale_input_gives_96_at_level_2() {
        let net = GlcoNet::new(&ModelConfig { channels: 4, scale_set: vec![3], encoder_widths: [2, 2, 3, 4, 4], ..ModelConfig::default() }, 3).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(rand_tensor(&[1, 3, 384, 384], 4));
        let out = net.forward(&mut g, img).unwrap();
        assert_eq!(g.value(out.d[0]).shape(), &[1, 1, 96, 96]);
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let net = GlcoNet::new(&tiny_cfg(), 1).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[1, 3, 48, 64]));
        match net.forward(&mut g, img) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn zero_weight_model_predicts_exactly_half() {
        let mut net = GlcoNet::new(&tiny_cfg(), 5).unwrap();
        net.zero_params();
        let p = net.predict(&rand_tensor(&[1, 3, 64, 64], 6)).unwrap();
        for &v in p.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let net = GlcoNet::new(&tiny_cfg(), 7).unwrap();
        let img = rand_tensor(&[1, 3, 64, 64], 8);
        let a = net.predict(&img).unwrap();
        let b = net.predict(&img).unwrap();
        assert_eq!(a, b, "two forward passes differ");
        let other = GlcoNet::new(&tiny_cfg(), 8).unwrap();
        assert_ne!(a, other.predict(&img).unwrap(), "different seeds should differ");
    }

    #[test]
    fn ard_and_fpn_decoders_differ() {
        let cfg = tiny_cfg();
        let ard_net = GlcoNet::new(&cfg, 9).unwrap();
        let fpn_net = GlcoNet::new(&ModelConfig { ard: false, ..cfg }, 9).unwrap();
        let img = rand_tensor(&[1, 3, 64, 64], 10);
        let a = ard_net.predict(&img).unwrap();
        let b = fpn_net.predict(&img).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn every_output_participates_in_the_loss() {
        let net = GlcoNet::new(&tiny_cfg(), 11).unwrap();
        let img = rand_tensor(&[1, 3, 64, 64], 12);
        let gt = rand_tensor(&[1, 1, 64, 64], 13).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let w = crate::loss::weight_map(&gt).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(img);
        let out = net.forward(&mut g, x).unwrap();
        let (loss, _) = crate::loss::total_loss(&mut g, &out, &gt, &w).unwrap();
        g.backward(loss).unwrap();
        // Gradient flows to x only through every D level jointly; check each
        // D node received a gradient directly.
        for (i, &d) in out.d.iter().enumerate() {
            let gd = g.grad(d).expect("grad missing");
            assert!(gd.data().iter().any(|&v| v != 0.0), "level {} has zero gradient", i + 2);
        }
    }

    #[test]
    fn scale_subsets_build_and_run() {
        for scales in [vec![3], vec![5], vec![7], vec![3, 5, 7]] {
            let cfg = ModelConfig { scale_set: scales.clone(), ..tiny_cfg() };
            let net = GlcoNet::new(&cfg, 13).unwrap();
            let p = net.predict(&rand_tensor(&[1, 3, 64, 64], 14)).unwrap();
            assert!(p.all_finite(), "scales {scales:?}");
        }
    }
}

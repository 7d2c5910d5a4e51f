//! Transformer Parsing Module decoder and the single/dual-head model.
//!
//! Every pyramid level is projected to a shared embedding width `C`, passed
//! through one pre-norm attention block and resized to `H/4 × W/4`. The four
//! maps are fused and classified by a 1×1 convolution whose logits are
//! resized to the input resolution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{check_input_dims, Attention, Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{config_err, dim_err, validation_err, Error, Result};
use crate::nn::{seeded_rng, Bound, Builder, Conv2d, LayerNorm, Linear, ParamStore, TokenGrid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the four TPM outputs are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Sum,
    Concat,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Sum => "sum",
            Fusion::Concat => "concat",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Fusion::Sum),
            "concat" => Ok(Fusion::Concat),
            other => Err(config_err!("unknown fusion mode {other:?} (expected sum|concat)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpmConfig {
    pub embed_dim: usize,
    pub fusion: Fusion,
    pub heads: usize,
    /// Key/value spatial reduction per pyramid level.
    pub sr_ratios: [usize; 4],
}

impl TpmConfig {
    /// Width-64 decoder matching the deployment encoders' reduction ratios.
    pub fn deployment() -> Self {
        Self { embed_dim: 64, fusion: Fusion::Sum, heads: 1, sr_ratios: [8, 4, 2, 1] }
    }

    pub fn toy() -> Self {
        Self { embed_dim: 8, fusion: Fusion::Sum, heads: 1, sr_ratios: [1, 1, 1, 1] }
    }

    pub fn fused_channels(&self) -> usize {
        match self.fusion {
            Fusion::Sum => self.embed_dim,
            Fusion::Concat => 4 * self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(config_err!("TPM embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.sr_ratios.contains(&0) {
            return Err(config_err!("TPM sr ratios must be positive"));
        }
        Ok(())
    }
}

/// Paired full-resolution logits of the two heads.
#[derive(Clone, Debug)]
pub struct DualSegmentation<T> {
    /// `[general_classes, H, W]`
    pub general_logits: Tensor<T>,
    /// `[trans_classes, H, W]`
    pub trans_logits: Tensor<T>,
}

/// One pyramid level's parsing unit: projection, attention, resize.
#[derive(Clone, Debug)]
pub struct Tpm {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub attn: Attention,
}

impl Tpm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_dim: usize, cfg: &TpmConfig, level: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Tpm {
                proj: Linear::new(b, "proj", in_dim, cfg.embed_dim),
                norm: LayerNorm::new(b, "norm", cfg.embed_dim),
                attn: Attention::new(b, "attn", cfg.embed_dim, cfg.heads, cfg.sr_ratios[level])?,
            })
        })
    }

    /// `[Cs, h, w]` → `[C, h4, w4]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, f: &Var<T>, h4: usize, w4: usize) -> Result<Var<T>> {
        if f.value().rank() != 3 || f.shape()[0] != self.proj.in_dim {
            return Err(dim_err!("TPM expects [{}, h, w], got {:?}", self.proj.in_dim, f.shape()));
        }
        let (h, w) = (f.shape()[1], f.shape()[2]);
        if h > h4 || w > w4 {
            return Err(validation_err!("TPM target {h4}x{w4} smaller than source {h}x{w}"));
        }
        let grid = TokenGrid::from_map(g, f)?;
        let grid = grid.with_tokens(self.proj.forward(g, p, &grid.tokens)?);
        let a = self.attn.forward(g, p, &grid.with_tokens(self.norm.forward(g, p, &grid.tokens)?))?;
        let grid = grid.with_tokens(g.add(&grid.tokens, &a)?);
        let map = grid.to_map(g)?;
        g.bilinear_resize(&map, h4, w4)
    }
}

/// Sums or channel-concatenates four identically shaped maps, in level order.
pub fn fuse_pyramid<T: Scalar>(g: &Graph<T>, maps: &[Var<T>; 4], fusion: Fusion) -> Result<Var<T>> {
    for m in &maps[1..] {
        if m.shape() != maps[0].shape() {
            return Err(dim_err!("fusion inputs {:?} and {:?} differ", maps[0].shape(), m.shape()));
        }
    }
    match fusion {
        Fusion::Sum => {
            let mut acc = maps[0].clone();
            for m in &maps[1..] {
                acc = g.add(&acc, m)?;
            }
            Ok(acc)
        }
        Fusion::Concat => g.concat0(maps),
    }
}

/// 1×1 classifier followed by a ×4 bilinear upsample.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub conv: Conv2d,
    pub num_classes: usize,
}

impl SegHead {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, in_dim: usize, num_classes: usize) -> Self {
        SegHead { conv: Conv2d::new(b, "head", in_dim, num_classes, 1, 1, 0), num_classes }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, fused: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        if fused.value().rank() != 3 || fused.shape()[1] * 4 != h || fused.shape()[2] * 4 != w {
            return Err(validation_err!("seg head output {h}x{w} is not 4x the fused map {:?}", fused.shape()));
        }
        let logits = self.conv.forward(g, p, fused)?;
        g.bilinear_resize(&logits, h, w)
    }
}

/// Output of one decoder stack.
#[derive(Clone, Debug)]
pub struct DecoderOutput<T> {
    pub logits: Var<T>,
    /// Per-level TPM outputs at `H/4 × W/4`.
    pub stage_maps: [Var<T>; 4],
}

/// Four TPMs, fusion and a segmentation head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub tpms: Vec<Tpm>,
    pub head: SegHead,
    pub fusion: Fusion,
    /// Parameter-name prefix of this stack.
    pub prefix: String,
}

impl Decoder {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        enc: &EncoderConfig,
        cfg: &TpmConfig,
        num_classes: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(config_err!("decoder {name} needs at least one class"));
        }
        b.scope(name, |b| {
            let tpms = (0..4)
                .map(|i| Tpm::new(b, &format!("tpm{}", i + 1), enc.stage_channels[i], cfg, i))
                .collect::<Result<Vec<_>>>()?;
            let head = SegHead::new(b, cfg.fused_channels(), num_classes);
            Ok(Decoder { tpms, head, fusion: cfg.fusion, prefix: format!("decoder.{name}") })
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Bound<T>,
        pyramid: &FeaturePyramid<T>,
        h: usize,
        w: usize,
    ) -> Result<DecoderOutput<T>> {
        let (h4, w4) = (h / 4, w / 4);
        let maps: Vec<Var<T>> = self
            .tpms
            .iter()
            .zip(&pyramid.levels)
            .map(|(tpm, f)| tpm.forward(g, p, f, h4, w4))
            .collect::<Result<_>>()?;
        let stage_maps: [Var<T>; 4] = maps.try_into().expect("four pyramid levels");
        let fused = fuse_pyramid(g, &stage_maps, self.fusion)?;
        let logits = self.head.forward(g, p, &fused, h, w)?;
        Ok(DecoderOutput { logits, stage_maps })
    }
}

/// Architecture of a complete model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub tpm: TpmConfig,
    pub general_classes: usize,
    pub trans_classes: usize,
    /// Second (transparency) head present.
    pub dual: bool,
}

/// Classes of the general-scene head at deployment scale.
pub const GENERAL_CLASSES: usize = 13;
/// Classes of the transparency head (background + 11 categories).
pub const TRANS_CLASSES: usize = 12;

impl ModelConfig {
    pub fn tiny() -> Self {
        Self::deployment(EncoderConfig::tiny())
    }

    pub fn small() -> Self {
        Self::deployment(EncoderConfig::small())
    }

    pub fn medium() -> Self {
        Self::deployment(EncoderConfig::medium())
    }

    fn deployment(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            tpm: TpmConfig::deployment(),
            general_classes: GENERAL_CLASSES,
            trans_classes: TRANS_CLASSES,
            dual: true,
        }
    }

    /// Four classes per head on 32×32 inputs.
    pub fn toy() -> Self {
        Self { encoder: EncoderConfig::toy(), tpm: TpmConfig::toy(), general_classes: 4, trans_classes: 4, dual: true }
    }

    pub fn single_head(mut self) -> Self {
        self.dual = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.tpm.validate()?;
        if self.general_classes == 0 || (self.dual && self.trans_classes == 0) {
            return Err(config_err!("class counts must be positive"));
        }
        Ok(())
    }
}

/// Result of a full forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub pyramid: FeaturePyramid<T>,
    /// General head first, then the transparency head when present.
    pub heads: Vec<DecoderOutput<T>>,
}

/// Shared encoder with one or two decoder stacks.
#[derive(Clone, Debug)]
pub struct Trans4Trans<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub general: Decoder,
    pub trans: Option<Decoder>,
}

impl<T: Scalar> Trans4Trans<T> {
    /// Builds and initialises a model deterministically from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let encoder = Encoder::new(&mut b, &cfg.encoder)?;
        let (general, trans) = b.scope("decoder", |b| -> Result<_> {
            let general = Decoder::new(b, "general", &cfg.encoder, &cfg.tpm, cfg.general_classes)?;
            let trans = if cfg.dual {
                Some(Decoder::new(b, "trans", &cfg.encoder, &cfg.tpm, cfg.trans_classes)?)
            } else {
                None
            };
            Ok((general, trans))
        })?;
        Ok(Self { cfg: cfg.clone(), params, encoder, general, trans })
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Trans4Trans<U> {
        Trans4Trans {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            general: self.general.clone(),
            trans: self.trans.clone(),
        }
    }

    pub fn decoders(&self) -> impl Iterator<Item = &Decoder> {
        std::iter::once(&self.general).chain(self.trans.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_image(&self, image: &[usize]) -> Result<(usize, usize)> {
        if image.len() != 3 || image[0] != self.cfg.encoder.in_channels {
            return Err(dim_err!("model expects a [{}, H, W] image, got {image:?}", self.cfg.encoder.in_channels));
        }
        check_input_dims(image[1], image[2])?;
        Ok((image[1], image[2]))
    }

    /// Shared encoder pass followed by every decoder stack.
    pub fn forward(&self, g: &Graph<T>, p: &Bound<T>, image: &Var<T>) -> Result<ModelOutput<T>> {
        let (h, w) = self.check_image(image.shape())?;
        let pyramid = self.encoder.forward(g, p, image)?;
        let heads = self.decoders().map(|d| d.forward(g, p, &pyramid, h, w)).collect::<Result<Vec<_>>>()?;
        Ok(ModelOutput { pyramid, heads })
    }

    /// Inference-only forward returning per-head logits.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let x = g.constant(image.clone());
        let out = self.forward(&g, &p, &x)?;
        Ok(out.heads.into_iter().map(|h| h.logits.into_tensor()).collect())
    }

    /// Both heads' full-resolution logits; requires a dual-head model.
    pub fn dual_forward(&self, image: &Tensor<T>) -> Result<DualSegmentation<T>> {
        if self.trans.is_none() {
            return Err(config_err!("dual_forward on a single-head model"));
        }
        let mut heads = self.infer(image)?.into_iter();
        Ok(DualSegmentation { general_logits: heads.next().unwrap(), trans_logits: heads.next().unwrap() })
    }
}

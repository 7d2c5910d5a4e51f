//! Four-stage pyramid transformer encoder.
//!
//! Each stage embeds its input with an overlapping strided convolution,
//! adds a learned absolute position embedding and runs a stack of pre-norm
//! blocks (attention with optional key/value spatial reduction, then a
//! feed-forward with a 3×3 depthwise convolution). Stage outputs sit at
//! 1/4, 1/8, 1/16 and 1/32 of the input resolution.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{Bound, Builder, Conv2d, DepthwiseConv2d, LayerNorm, Linear, TokenGrid};
use crate::scalar::Scalar;

/// Kernel, stride and padding of a patch-embedding convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Downsampling rate of each pyramid level relative to the input image.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub ffn_expansion: [usize; 4],
    pub first_patch: PatchGeometry,
    pub later_patch: PatchGeometry,
    /// `(H, W)` the position embeddings are sized for.
    pub base_resolution: (usize, usize),
}

impl EncoderConfig {
    fn pyramid(depths: [usize; 4]) -> Self {
        Self {
            in_channels: 3,
            stage_channels: [64, 128, 320, 512],
            stage_depths: depths,
            heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            ffn_expansion: [8, 8, 4, 4],
            first_patch: PatchGeometry { kernel: 7, stride: 4, pad: 3 },
            later_patch: PatchGeometry { kernel: 3, stride: 2, pad: 1 },
            base_resolution: (512, 512),
        }
    }

    /// Two blocks per stage.
    pub fn tiny() -> Self {
        Self::pyramid([2, 2, 2, 2])
    }

    pub fn small() -> Self {
        Self::pyramid([3, 4, 6, 3])
    }

    pub fn medium() -> Self {
        Self::pyramid([3, 4, 18, 3])
    }

    /// Desk-scale configuration for 32×32 inputs with exact full attention.
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [8, 16, 24, 32],
            stage_depths: [2, 2, 2, 2],
            heads: [1, 2, 3, 4],
            sr_ratios: [1, 1, 1, 1],
            ffn_expansion: [2, 2, 2, 2],
            first_patch: PatchGeometry { kernel: 7, stride: 4, pad: 3 },
            later_patch: PatchGeometry { kernel: 3, stride: 2, pad: 1 },
            base_resolution: (32, 32),
        }
    }

    pub fn patch(&self, stage: usize) -> PatchGeometry {
        if stage == 0 {
            self.first_patch
        } else {
            self.later_patch
        }
    }

    /// Input channels seen by stage `stage`.
    pub fn stage_in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.in_channels
        } else {
            self.stage_channels[stage - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.first_patch.stride != PYRAMID_STRIDES[0] || self.later_patch.stride != 2 {
            return Err(config_err!(
                "patch strides {}/{} do not produce the 4/8/16/32 pyramid",
                self.first_patch.stride,
                self.later_patch.stride
            ));
        }
        for s in 0..4 {
            let (c, h) = (self.stage_channels[s], self.heads[s]);
            if c == 0 || h == 0 || self.sr_ratios[s] == 0 || self.ffn_expansion[s] == 0 {
                return Err(config_err!("stage {} has a zero-sized setting", s + 1));
            }
            if c % h != 0 {
                return Err(config_err!("stage {} channels {c} not divisible by {h} heads", s + 1));
            }
        }
        if self.in_channels == 0 {
            return Err(config_err!("in_channels must be positive"));
        }
        let (bh, bw) = self.base_resolution;
        if bh % 32 != 0 || bw % 32 != 0 || bh == 0 || bw == 0 {
            return Err(config_err!("base resolution {bh}x{bw} must be a positive multiple of 32"));
        }
        for s in 0..4 {
            let r = self.sr_ratios[s];
            let (h, w) = (bh / PYRAMID_STRIDES[s], bw / PYRAMID_STRIDES[s]);
            if h % r != 0 || w % r != 0 {
                return Err(config_err!("stage {} grid {h}x{w} not divisible by sr ratio {r}", s + 1));
            }
        }
        Ok(())
    }
}

/// Checks an image-sized input against the 32-pixel pyramid granularity.
pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(config_err!("input {h}x{w} must be a positive multiple of 32 in both dimensions"));
    }
    Ok(())
}

/// The four encoder outputs, each `[C_i, H/s_i, W/s_i]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: [Var<T>; 4],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn level(&self, i: usize) -> &Var<T> {
        &self.levels[i]
    }

    pub fn shapes(&self) -> [Vec<usize>; 4] {
        std::array::from_fn(|i| self.levels[i].shape().to_vec())
    }
}

static POS_RESIZE_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub pos: crate::nn::ParamId,
    /// Position-embedding grid `(h, w)`.
    pub pos_grid: (usize, usize),
}

impl PatchEmbed {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &EncoderConfig, stage: usize) -> Self {
        let geom = cfg.patch(stage);
        let (cin, c) = (cfg.stage_in_channels(stage), cfg.stage_channels[stage]);
        let stride = PYRAMID_STRIDES[stage];
        let pos_grid = (cfg.base_resolution.0 / stride, cfg.base_resolution.1 / stride);
        b.scope("patch_embed", |b| PatchEmbed {
            conv: Conv2d::new(b, "proj", cin, c, geom.kernel, geom.stride, geom.pad),
            norm: LayerNorm::new(b, "norm", c),
            pos: b.normal("pos_embed", vec![pos_grid.0 * pos_grid.1, c], 0.02),
            pos_grid,
        })
    }

    /// `[Cin, H, W]` → tokens on the `H/stride × W/stride` grid.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<TokenGrid<T>> {
        if x.value().rank() != 3 || x.shape()[0] != self.conv.cin {
            return Err(dim_err!("patch embed expects [{}, H, W], got {:?}", self.conv.cin, x.shape()));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let s = self.conv.stride;
        if h % s != 0 || w % s != 0 {
            return Err(config_err!("patch embed input {h}x{w} not divisible by stride {s}"));
        }
        let map = self.conv.forward(g, p, x)?;
        let grid = TokenGrid::from_map(g, &map)?;
        let normed = self.norm.forward(g, p, &grid.tokens)?;
        let pos = self.position_embedding(g, p, grid.h, grid.w)?;
        Ok(grid.with_tokens(g.add(&normed, &pos)?))
    }

    fn position_embedding<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, h: usize, w: usize) -> Result<Var<T>> {
        let pos = p.var(self.pos);
        if (h, w) == self.pos_grid {
            return Ok(pos.clone());
        }
        if !POS_RESIZE_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!(
                "input grid {h}x{w} differs from position-embedding grid {}x{}; interpolating bilinearly",
                self.pos_grid.0,
                self.pos_grid.1
            );
        }
        let grid = TokenGrid::new(pos.clone(), self.pos_grid.0, self.pos_grid.1)?;
        let map = grid.to_map(g)?;
        let resized = g.bilinear_resize(&map, h, w)?;
        Ok(TokenGrid::from_map(g, &resized)?.tokens)
    }
}

/// Multi-head self-attention with optional key/value spatial reduction.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub reduction: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub dim: usize,
    pub sr_ratio: usize,
}

impl Attention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("attention dim {dim} not divisible by {heads} heads"));
        }
        if sr_ratio == 0 {
            return Err(config_err!("sr ratio must be at least 1"));
        }
        Ok(b.scope(name, |b| Attention {
            q: Linear::new(b, "q", dim, dim),
            kv: Linear::new(b, "kv", dim, 2 * dim),
            proj: Linear::new(b, "proj", dim, dim),
            reduction: (sr_ratio > 1).then(|| (Conv2d::new(b, "sr", dim, dim, sr_ratio, sr_ratio, 0), LayerNorm::new(b, "sr_norm", dim))),
            heads,
            dim,
            sr_ratio,
        }))
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `softmax(Q Kᵀ / √d) V` per head, heads concatenated, then projected.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &TokenGrid<T>) -> Result<Var<T>> {
        if x.channels() != self.dim {
            return Err(dim_err!("attention over {} channels got tokens {:?}", self.dim, x.tokens.shape()));
        }
        let q = self.q.forward(g, p, &x.tokens)?;
        let kv_src = match &self.reduction {
            None => x.tokens.clone(),
            Some((conv, norm)) => {
                if x.h % self.sr_ratio != 0 || x.w % self.sr_ratio != 0 {
                    return Err(config_err!("grid {}x{} not divisible by sr ratio {}", x.h, x.w, self.sr_ratio));
                }
                let reduced = conv.forward(g, p, &x.to_map(g)?)?;
                let grid = TokenGrid::from_map(g, &reduced)?;
                norm.forward(g, p, &grid.tokens)?
            }
        };
        let kv = self.kv.forward(g, p, &kv_src)?;
        let k = g.slice_cols(&kv, 0, self.dim)?;
        let v = g.slice_cols(&kv, self.dim, self.dim)?;
        let d = self.head_dim();
        let scale = T::one() / T::from_usize_lossy(d).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (g.slice_cols(&q, h * d, d)?, g.slice_cols(&k, h * d, d)?, g.slice_cols(&v, h * d, d)?)
            };
            let scores = g.matmul(&qh, &g.transpose(&kh)?)?;
            let weights = g.softmax(&g.scale(&scores, scale), 1)?;
            outs.push(g.matmul(&weights, &vh)?);
        }
        let merged = if outs.len() == 1 { outs.pop().unwrap() } else { g.concat_cols(&outs)? };
        self.proj.forward(g, p, &merged)
    }
}

/// Feed-forward with a 3×3 depthwise convolution between the two linears.
#[derive(Clone, Debug)]
pub struct DwFfn {
    pub fc1: Linear,
    pub dw: DepthwiseConv2d,
    pub fc2: Linear,
}

impl DwFfn {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, expansion: usize) -> Self {
        let hidden = dim * expansion;
        b.scope(name, |b| DwFfn {
            fc1: Linear::new(b, "fc1", dim, hidden),
            dw: DepthwiseConv2d::new(b, "dwconv", hidden, 3),
            fc2: Linear::new(b, "fc2", hidden, dim),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &TokenGrid<T>) -> Result<Var<T>> {
        let hidden = x.with_tokens(self.fc1.forward(g, p, &x.tokens)?);
        let mixed = self.dw.forward(g, p, &hidden.to_map(g)?)?;
        let tokens = TokenGrid::from_map(g, &mixed)?.tokens;
        let act = g.gelu(&tokens);
        self.fc2.forward(g, p, &act)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: DwFfn,
}

impl Block {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize, sr: usize, expansion: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Block {
                norm1: LayerNorm::new(b, "norm1", dim),
                attn: Attention::new(b, "attn", dim, heads, sr)?,
                norm2: LayerNorm::new(b, "norm2", dim),
                ffn: DwFfn::new(b, "mlp", dim, expansion),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &TokenGrid<T>) -> Result<TokenGrid<T>> {
        let a = self.attn.forward(g, p, &x.with_tokens(self.norm1.forward(g, p, &x.tokens)?))?;
        let x = x.with_tokens(g.add(&x.tokens, &a)?);
        let f = self.ffn.forward(g, p, &x.with_tokens(self.norm2.forward(g, p, &x.tokens)?))?;
        Ok(x.with_tokens(g.add(&x.tokens, &f)?))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stages = b.scope("encoder", |b| {
            (0..4)
                .map(|s| {
                    b.scope(&format!("stage{}", s + 1), |b| {
                        let embed = PatchEmbed::new(b, cfg, s);
                        let blocks = (0..cfg.stage_depths[s])
                            .map(|i| {
                                Block::new(
                                    b,
                                    &format!("block{i}"),
                                    cfg.stage_channels[s],
                                    cfg.heads[s],
                                    cfg.sr_ratios[s],
                                    cfg.ffn_expansion[s],
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Stage { embed, blocks })
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self { cfg: cfg.clone(), stages })
    }

    /// Runs one stage on a `[Cin, H, W]` map.
    pub fn stage_forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, stage: usize, x: &Var<T>) -> Result<Var<T>> {
        let st = &self.stages[stage];
        let mut grid = st.embed.forward(g, p, x)?;
        for block in &st.blocks {
            grid = block.forward(g, p, &grid)?;
        }
        grid.to_map(g)
    }

    /// `[3, H, W]` image → pyramid at strides 4, 8, 16, 32.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, image: &Var<T>) -> Result<FeaturePyramid<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.cfg.in_channels {
            return Err(dim_err!("encoder expects [{}, H, W], got {s:?}", self.cfg.in_channels));
        }
        check_input_dims(s[1], s[2])?;
        let f1 = self.stage_forward(g, p, 0, image)?;
        let f2 = self.stage_forward(g, p, 1, &f1)?;
        let f3 = self.stage_forward(g, p, 2, &f2)?;
        let f4 = self.stage_forward(g, p, 3, &f3)?;
        Ok(FeaturePyramid { levels: [f1, f2, f3, f4] })
    }
}

//! Parameter storage and the small layers the encoder and decoder are
//! assembled from. Layers only hold [`ParamId`]s; values live in a
//! [`ParamStore`] so one model description serves any scalar type.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value: Arc::new(value) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Mutable access; clones the storage only if a graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    /// Replaces a parameter value; shapes must agree.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, replacement {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            ));
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    /// Total scalar count over all stored tensors.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: Arc::new(p.value.cast()) })
                .collect(),
        }
    }

    /// Binds every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &Graph<T>) -> Bound<T> {
        Bound { vars: self.params.iter().map(|p| graph.leaf_shared(p.value.clone())).collect() }
    }
}

/// Parameters bound into one graph, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Var<T>)> {
        self.vars.iter().enumerate().map(|(i, v)| (ParamId(i), v))
    }
}

/// Allocates and initialises parameters under a hierarchical name prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut child = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng).expect("layer shapes are positive");
        let full = self.full_name(name);
        self.store.push(full, t)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let t = Tensor::uniform(shape, -bound, bound, self.rng).expect("layer shapes are positive");
        let full = self.full_name(name);
        self.store.push(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) -> ParamId {
        let t = Tensor::full(shape, T::from_f64_lossy(v)).expect("layer shapes are positive");
        let full = self.full_name(name);
        self.store.push(full, t)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// Fully connected layer acting on `[N, in]` token matrices.
/// The weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        b.scope(name, |b| {
            let bound = (1.0 / in_dim as f64).sqrt();
            Linear {
                weight: b.uniform("weight", vec![in_dim, out_dim], bound),
                bias: b.constant("bias", vec![out_dim], 0.0),
                in_dim,
                out_dim,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_row_bias(&y, p.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Layer normalisation over the channel (last) axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

/// Normalisation epsilon used by every [`LayerNorm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| LayerNorm {
            gamma: b.constant("weight", vec![dim], 1.0),
            beta: b.constant("bias", vec![dim], 0.0),
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), T::from_f64_lossy(LAYER_NORM_EPS))
    }
}

/// Dense 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        b.scope(name, |b| {
            let fan_in = (cin * kernel * kernel) as f64;
            Conv2d {
                weight: b.uniform("weight", vec![cout, cin, kernel, kernel], (1.0 / fan_in).sqrt()),
                bias: b.constant("bias", vec![cout], 0.0),
                cin,
                cout,
                kernel,
                stride,
                pad,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, self.pad)
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Per-channel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, kernel: usize) -> Self {
        b.scope(name, |b| {
            let fan_in = (kernel * kernel) as f64;
            DepthwiseConv2d {
                weight: b.uniform("weight", vec![channels, 1, kernel, kernel], (1.0 / fan_in).sqrt()),
                bias: b.constant("bias", vec![channels], 0.0),
                channels,
                kernel,
            }
        })
    }

    /// Same-size ("pad = k/2", stride 1) depthwise convolution.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = g.depthwise_conv2d(x, p.var(self.weight), 1, self.kernel / 2)?;
        g.add_channel_bias(&y, p.var(self.bias))
    }
}

/// Token matrix `[N, C]` together with its `h × w` spatial layout.
#[derive(Clone, Debug)]
pub struct TokenGrid<T> {
    pub tokens: Var<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(tokens: Var<T>, h: usize, w: usize) -> Result<Self> {
        if tokens.value().rank() != 2 || tokens.shape()[0] != h * w {
            return Err(dim_err!("token matrix {:?} does not cover a {h}x{w} grid", tokens.shape()));
        }
        Ok(Self { tokens, h, w })
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// `[C, H, W]` map into `[H·W, C]` tokens.
    pub fn from_map(g: &Graph<T>, map: &Var<T>) -> Result<Self> {
        if map.value().rank() != 3 {
            return Err(dim_err!("expected a [C,H,W] map, got {:?}", map.shape()));
        }
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let flat = g.reshape(map, vec![c, h * w])?;
        Ok(Self { tokens: g.transpose(&flat)?, h, w })
    }

    /// Back to a `[C, H, W]` map.
    pub fn to_map(&self, g: &Graph<T>) -> Result<Var<T>> {
        let c = self.channels();
        let t = g.transpose(&self.tokens)?;
        g.reshape(&t, vec![c, self.h, self.w])
    }

    pub fn with_tokens(&self, tokens: Var<T>) -> Self {
        Self { tokens, h: self.h, w: self.w }
    }
}

/// Seeded generator used for every initialisation and synthetic draw.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform index helper for callers that only hold a `&mut ChaCha8Rng`.
pub fn pick<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.gen_range(0..n)
}

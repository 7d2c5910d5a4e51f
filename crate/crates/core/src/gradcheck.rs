//! Central finite-difference checks of reverse-mode gradients in `f64`.
//!
//! Each check reduces an op's output to `L = Σ w ⊙ f(x)` with fixed random
//! `w`, then compares `∂L/∂x` from the tape against
//! `(L(x + h) − L(x − h)) / 2h` entry by entry.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{ModelConfig, Trans4Trans};
use crate::encoder::Attention;
use crate::error::Result;
use crate::nn::{seeded_rng, Bound, Builder, ParamId, ParamStore, TokenGrid};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor so entries with near-zero gradient are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Forward<'a> = dyn Fn(&Graph<f64>, &Bound<f64>) -> Result<Var<f64>> + 'a;

fn weighted_sum(g: &Graph<f64>, out: &Var<f64>, w: &Tensor<f64>) -> Result<Var<f64>> {
    let wv = g.constant(w.clone());
    Ok(g.sum(&g.mul(out, &wv)?))
}

/// Checks every stored tensor; `per_tensor` caps the entries sampled from each.
pub fn check_store(
    name: &str,
    store: &mut ParamStore<f64>,
    seed: u64,
    per_tensor: Option<usize>,
    f: &Forward<'_>,
) -> Result<GradCheck> {
    let mut rng = seeded_rng(seed ^ 0x5EED);
    let g = Graph::new();
    let p = store.bind(&g);
    let out = f(&g, &p)?;
    let w = Tensor::randn(out.shape().to_vec(), 1.0, &mut rng)?;
    let loss = weighted_sum(&g, &out, &w)?;
    let grads = g.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = p.iter().map(|(_, v)| grads.get_or_zeros(v)).collect();
    drop(p);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::inference();
        let p = store.bind(&g);
        weighted_sum(&g, &f(&g, &p)?, &w)?.value().item()
    };

    let mut report = GradCheck { name: name.to_string(), entries: 0, max_rel_error: 0.0, worst: String::new() };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let entries: Vec<usize> = match per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(analytic[id.0].data()[j], numeric);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = format!("{}[{j}]", store.name(id));
            }
        }
    }
    Ok(report)
}

struct Case {
    store: ParamStore<f64>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: seeded_rng(seed) }
    }

    fn input(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = Tensor::randn(shape.to_vec(), 1.0, &mut self.rng)?;
        Ok(self.store.push(name, t))
    }

    fn run(mut self, name: &str, seed: u64, f: &Forward<'_>) -> Result<GradCheck> {
        check_store(name, &mut self.store, seed, None, f)
    }
}

/// One check per differentiable op plus attention with and without
/// spatial reduction.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let s = |k: u64| seed.wrapping_mul(31).wrapping_add(k);

    let mut c = Case::new(s(1));
    let (a, b) = (c.input("a", &[3, 4])?, c.input("b", &[4, 5])?);
    out.push(c.run("matmul", s(1), &move |g, p| g.matmul(p.var(a), p.var(b)))?);

    let mut c = Case::new(s(2));
    let a = c.input("a", &[3, 4])?;
    out.push(c.run("transpose", s(2), &move |g, p| g.transpose(p.var(a)))?);

    let mut c = Case::new(s(3));
    let a = c.input("a", &[2, 6])?;
    out.push(c.run("reshape", s(3), &move |g, p| g.reshape(p.var(a), vec![3, 4]))?);

    let mut c = Case::new(s(4));
    let (a, b) = (c.input("a", &[2, 3])?, c.input("b", &[2, 3])?);
    out.push(c.run("add", s(4), &move |g, p| g.add(p.var(a), p.var(b)))?);

    let mut c = Case::new(s(5));
    let (a, b) = (c.input("a", &[2, 3])?, c.input("b", &[2, 3])?);
    out.push(c.run("mul", s(5), &move |g, p| g.mul(p.var(a), p.var(b)))?);

    let mut c = Case::new(s(6));
    let a = c.input("a", &[2, 3])?;
    out.push(c.run("scale", s(6), &move |g, p| Ok(g.scale(p.var(a), 0.37)))?);

    let mut c = Case::new(s(7));
    let (a, b) = (c.input("a", &[4, 3])?, c.input("bias", &[3])?);
    out.push(c.run("add_row_bias", s(7), &move |g, p| g.add_row_bias(p.var(a), p.var(b)))?);

    let mut c = Case::new(s(8));
    let (a, b) = (c.input("a", &[3, 2, 2])?, c.input("bias", &[3])?);
    out.push(c.run("add_channel_bias", s(8), &move |g, p| g.add_channel_bias(p.var(a), p.var(b)))?);

    let mut c = Case::new(s(9));
    let a = c.input("a", &[3, 4])?;
    out.push(c.run("sum", s(9), &move |g, p| Ok(g.sum(p.var(a))))?);

    let mut c = Case::new(s(10));
    let a = c.input("a", &[3, 4])?;
    out.push(c.run("mean", s(10), &move |g, p| Ok(g.mean(p.var(a))))?);

    let mut c = Case::new(s(11));
    let (x, w, b) = (c.input("x", &[2, 5, 5])?, c.input("w", &[3, 2, 3, 3])?, c.input("bias", &[3])?);
    out.push(c.run("conv2d_s1_p1", s(11), &move |g, p| g.conv2d(p.var(x), p.var(w), p.var(b), 1, 1))?);

    let mut c = Case::new(s(12));
    let (x, w, b) = (c.input("x", &[2, 8, 8])?, c.input("w", &[3, 2, 7, 7])?, c.input("bias", &[3])?);
    out.push(c.run("conv2d_s4_p3", s(12), &move |g, p| g.conv2d(p.var(x), p.var(w), p.var(b), 4, 3))?);

    let mut c = Case::new(s(13));
    let (x, w, b) = (c.input("x", &[3, 4, 4])?, c.input("w", &[2, 3, 1, 1])?, c.input("bias", &[2])?);
    out.push(c.run("conv2d_1x1", s(13), &move |g, p| g.conv2d(p.var(x), p.var(w), p.var(b), 1, 0))?);

    let mut c = Case::new(s(14));
    let (x, w) = (c.input("x", &[3, 5, 5])?, c.input("w", &[3, 1, 3, 3])?);
    out.push(c.run("depthwise_conv2d", s(14), &move |g, p| g.depthwise_conv2d(p.var(x), p.var(w), 1, 1))?);

    for axis in 0..2 {
        let mut c = Case::new(s(15 + axis as u64));
        let a = c.input("a", &[3, 4])?;
        out.push(c.run(&format!("softmax_axis{axis}"), s(15), &move |g, p| g.softmax(p.var(a), axis))?);
    }

    let mut c = Case::new(s(17));
    let (x, gm, bt) = (c.input("x", &[4, 5])?, c.input("gamma", &[5])?, c.input("beta", &[5])?);
    out.push(c.run("layer_norm", s(17), &move |g, p| g.layer_norm(p.var(x), p.var(gm), p.var(bt), 1e-6))?);

    let mut c = Case::new(s(18));
    let a = c.input("a", &[3, 4])?;
    out.push(c.run("gelu", s(18), &move |g, p| Ok(g.gelu(p.var(a))))?);

    let mut c = Case::new(s(19));
    let a = c.input("a", &[2, 3, 4])?;
    out.push(c.run("bilinear_up", s(19), &move |g, p| g.bilinear_resize(p.var(a), 7, 9))?);

    let mut c = Case::new(s(20));
    let a = c.input("a", &[2, 8, 8])?;
    out.push(c.run("bilinear_down", s(20), &move |g, p| g.bilinear_resize(p.var(a), 3, 5))?);

    let mut c = Case::new(s(21));
    let a = c.input("logits", &[4, 3, 3])?;
    let target = vec![0, 1, 2, 3, 255, 1, 0, 2, 3];
    out.push(c.run("cross_entropy", s(21), &move |g, p| g.cross_entropy(p.var(a), &target, 255))?);

    let mut c = Case::new(s(22));
    let a = c.input("a", &[3, 6])?;
    out.push(c.run("slice_cols", s(22), &move |g, p| g.slice_cols(p.var(a), 2, 3))?);

    let mut c = Case::new(s(23));
    let (a, b) = (c.input("a", &[3, 2])?, c.input("b", &[3, 4])?);
    out.push(c.run("concat_cols", s(23), &move |g, p| g.concat_cols(&[p.var(a).clone(), p.var(b).clone()]))?);

    let mut c = Case::new(s(24));
    let (a, b) = (c.input("a", &[2, 2, 3])?, c.input("b", &[1, 2, 3])?);
    out.push(c.run("concat0", s(24), &move |g, p| g.concat0(&[p.var(a).clone(), p.var(b).clone()]))?);

    for (k, sr) in [(25u64, 1usize), (26, 2)] {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(s(k));
        let attn = Attention::new(&mut Builder::new(&mut store, &mut rng), "attn", 4, 2, sr)?;
        let x = store.push("x", Tensor::randn(vec![16, 4], 1.0, &mut rng)?);
        randomize(&mut store, s(k));
        let f = move |g: &Graph<f64>, p: &Bound<f64>| attn.forward(g, p, &TokenGrid::new(p.var(x).clone(), 4, 4)?);
        out.push(check_store(&format!("attention_sr{sr}"), &mut store, s(k), None, &f)?);
    }
    Ok(out)
}

/// Moves every parameter off its structured initial value (unit gains,
/// zero biases) so each check sees generic gradients.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seeded_rng(seed ^ 0xA5A5);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let noise = Tensor::<f64>::randn(store.get(id).shape().to_vec(), 0.3, &mut rng).expect("stored shapes are valid");
        for (v, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

/// Sum of both heads' cross-entropy on a random 32×32 image through the toy
/// model, sampling `per_tensor` entries of every parameter.
pub fn model_check(seed: u64, per_tensor: usize) -> Result<GradCheck> {
    let cfg = ModelConfig::toy();
    let mut model = Trans4Trans::<f64>::new(&cfg, seed)?;
    randomize(&mut model.params, seed);
    let mut rng = seeded_rng(seed ^ 0xC0FFEE);
    let image = Tensor::uniform(vec![3, 32, 32], 0.0, 1.0, &mut rng)?;
    let tg: Vec<usize> = (0..32 * 32).map(|_| crate::nn::pick(&mut rng, cfg.general_classes)).collect();
    let tt: Vec<usize> = (0..32 * 32).map(|_| crate::nn::pick(&mut rng, cfg.trans_classes)).collect();
    let mut store = std::mem::take(&mut model.params);
    let f = |g: &Graph<f64>, p: &Bound<f64>| {
        let x = g.constant(image.clone());
        let out = model.forward(g, p, &x)?;
        let lg = g.cross_entropy(&out.heads[0].logits, &tg, 255)?;
        let lt = g.cross_entropy(&out.heads[1].logits, &tt, 255)?;
        g.add(&lg, &lt)
    };
    check_store("toy_model_end_to_end", &mut store, seed, Some(per_tensor), &f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-10, 0.0) < 1e-3);
    }
}

//! Closed-form parameter and multiply-accumulate accounting, plus wall-clock
//! latency measurement.
//!
//! Counting convention: one MAC is one multiply plus one add, and
//! `GFLOPs = 2 · MACs / 1e9`. Convolutions, linear layers and the two
//! attention products (`Q·Kᵀ`, `A·V`) are counted; normalisation,
//! activations, softmax, resizes and residual adds are not.
//!
//! The formulas here are written independently of the layer code so that
//! [`count_params`] can be cross-checked against the stored tensors.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::decoder::{ModelConfig, Trans4Trans};
use crate::encoder::{check_input_dims, PYRAMID_STRIDES};
use crate::error::{validation_err, Result};
use crate::nn::seeded_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cost of one named layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

/// Wall-clock forward latency over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub runs: usize,
    pub warmup: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>, warmup: usize) -> Self {
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Self { runs: samples_ms.len(), warmup, samples_ms, mean_ms: mean, std_ms: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input: (usize, usize),
    pub params: u64,
    pub macs: u64,
    pub gflops: f64,
    pub layers: Vec<LayerCost>,
    pub latency: Option<LatencyStats>,
}

pub const CONVENTION: &str = "1 MAC = 1 multiply + 1 add; GFLOPs = 2*MACs/1e9; conv, linear and attention products counted";

impl CostReport {
    fn from_layers(input: (usize, usize), layers: Vec<LayerCost>) -> Self {
        let params = layers.iter().map(|l| l.params).sum();
        let macs = layers.iter().map(|l| l.macs).sum();
        Self { input, params, macs, gflops: gflops(macs), layers, latency: None }
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }

    /// Totals over layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .fold((0, 0), |(p, m), l| (p + l.params, m + l.macs))
    }

    /// Aligned plain-text table with a convention header and totals.
    pub fn render_text(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "# cost report at {}x{} ({CONVENTION})", self.input.0, self.input.1);
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "layer", "params", "MACs");
        for l in &self.layers {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", l.name, l.params, l.macs);
        }
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "total", self.params, self.macs);
        let _ = writeln!(out, "MParams {:.3}  GFLOPs {:.3}", self.mparams(), self.gflops);
        if let Some(lat) = &self.latency {
            let _ = writeln!(out, "latency {:.3} ± {:.3} ms/frame over {} runs ({} warmup)", lat.mean_ms, lat.std_ms, lat.runs, lat.warmup);
        }
        out
    }

    /// One JSON object per layer followed by a summary object.
    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let line = serde_json::json!({"kind": "layer", "name": l.name, "params": l.params, "macs": l.macs});
            let _ = writeln!(out, "{line}");
        }
        let summary = serde_json::json!({
            "kind": "total",
            "input": [self.input.0, self.input.1],
            "params": self.params,
            "macs": self.macs,
            "gflops": self.gflops,
            "convention": CONVENTION,
            "latency_ms_mean": self.latency.as_ref().map(|l| l.mean_ms),
            "latency_ms_std": self.latency.as_ref().map(|l| l.std_ms),
        });
        let _ = writeln!(out, "{summary}");
        out
    }
}

pub fn gflops(macs: u64) -> f64 {
    2.0 * macs as f64 / 1e9
}

struct Acc {
    layers: Vec<LayerCost>,
}

impl Acc {
    fn push(&mut self, name: String, params: usize, macs: usize) {
        self.layers.push(LayerCost { name, params: params as u64, macs: macs as u64 });
    }

    fn linear(&mut self, name: String, tokens: usize, i: usize, o: usize) {
        self.push(name, i * o + o, tokens * i * o);
    }

    fn norm(&mut self, name: String, c: usize) {
        self.push(name, 2 * c, 0);
    }

    /// Attention over `tokens` queries with `dim` channels and reduction `sr`
    /// on an `h × w` grid.
    fn attention(&mut self, prefix: &str, h: usize, w: usize, dim: usize, sr: usize) {
        let n = h * w;
        let nk = (h / sr) * (w / sr);
        self.linear(format!("{prefix}.q"), n, dim, dim);
        if sr > 1 {
            self.push(format!("{prefix}.sr"), dim * dim * sr * sr + dim, dim * dim * sr * sr * nk);
            self.norm(format!("{prefix}.sr_norm"), dim);
        }
        self.linear(format!("{prefix}.kv"), nk, dim, 2 * dim);
        self.push(format!("{prefix}.scores"), 0, n * nk * dim);
        self.push(format!("{prefix}.context"), 0, n * nk * dim);
        self.linear(format!("{prefix}.proj"), n, dim, dim);
    }
}

fn encoder_costs(acc: &mut Acc, cfg: &ModelConfig, h: usize, w: usize) {
    let e = &cfg.encoder;
    for s in 0..4 {
        let (sh, sw) = (h / PYRAMID_STRIDES[s], w / PYRAMID_STRIDES[s]);
        let n = sh * sw;
        let c = e.stage_channels[s];
        let cin = e.stage_in_channels(s);
        let k = e.patch(s).kernel;
        let pre = format!("encoder.stage{}", s + 1);
        let pos = (e.base_resolution.0 / PYRAMID_STRIDES[s]) * (e.base_resolution.1 / PYRAMID_STRIDES[s]) * c;
        acc.push(format!("{pre}.patch_embed.proj"), cin * c * k * k + c, cin * c * k * k * n);
        acc.norm(format!("{pre}.patch_embed.norm"), c);
        acc.push(format!("{pre}.patch_embed.pos_embed"), pos, 0);
        for b in 0..e.stage_depths[s] {
            let bp = format!("{pre}.block{b}");
            let hidden = c * e.ffn_expansion[s];
            acc.norm(format!("{bp}.norm1"), c);
            acc.attention(&format!("{bp}.attn"), sh, sw, c, e.sr_ratios[s]);
            acc.norm(format!("{bp}.norm2"), c);
            acc.linear(format!("{bp}.mlp.fc1"), n, c, hidden);
            acc.push(format!("{bp}.mlp.dwconv"), hidden * 9 + hidden, n * hidden * 9);
            acc.linear(format!("{bp}.mlp.fc2"), n, hidden, c);
        }
    }
}

fn decoder_costs(acc: &mut Acc, cfg: &ModelConfig, name: &str, classes: usize, h: usize, w: usize) {
    let t = &cfg.tpm;
    let c = t.embed_dim;
    for s in 0..4 {
        let (sh, sw) = (h / PYRAMID_STRIDES[s], w / PYRAMID_STRIDES[s]);
        let pre = format!("decoder.{name}.tpm{}", s + 1);
        acc.linear(format!("{pre}.proj"), sh * sw, cfg.encoder.stage_channels[s], c);
        acc.norm(format!("{pre}.norm"), c);
        acc.attention(&format!("{pre}.attn"), sh, sw, c, t.sr_ratios[s]);
    }
    let fused = t.fused_channels();
    acc.push(format!("decoder.{name}.head"), fused * classes + classes, (h / 4) * (w / 4) * fused * classes);
}

/// Per-layer analytic costs at `h × w`.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate()?;
    check_input_dims(h, w)?;
    for s in 0..4 {
        let r = [cfg.encoder.sr_ratios[s], cfg.tpm.sr_ratios[s]];
        let side = (h / PYRAMID_STRIDES[s], w / PYRAMID_STRIDES[s]);
        if r.iter().any(|&r| side.0 % r != 0 || side.1 % r != 0) {
            return Err(validation_err!("level {} grid {side:?} not divisible by sr ratios {r:?}", s + 1));
        }
    }
    let mut acc = Acc { layers: Vec::new() };
    encoder_costs(&mut acc, cfg, h, w);
    decoder_costs(&mut acc, cfg, "general", cfg.general_classes, h, w);
    if cfg.dual {
        decoder_costs(&mut acc, cfg, "trans", cfg.trans_classes, h, w);
    }
    Ok(CostReport::from_layers((h, w), acc.layers))
}

/// Total parameters from the closed-form layer formulas.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    let (h, w) = cfg.encoder.base_resolution;
    Ok(count_flops(cfg, h, w)?.params)
}

/// Parameters of one decoder stack (four TPMs plus head) with `classes` outputs.
pub fn decoder_params(cfg: &ModelConfig, classes: usize) -> u64 {
    let (h, w) = cfg.encoder.base_resolution;
    let mut acc = Acc { layers: Vec::new() };
    decoder_costs(&mut acc, cfg, "x", classes, h, w);
    acc.layers.iter().map(|l| l.params).sum()
}

/// Mean and standard deviation of forward latency over `runs` timed passes
/// after `warmup` discarded ones, on a fixed pseudo-random image.
pub fn measure_latency<T: Scalar>(
    model: &Trans4Trans<T>,
    h: usize,
    w: usize,
    runs: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if runs < 10 {
        return Err(validation_err!("latency measurement needs at least 10 runs, got {runs}"));
    }
    check_input_dims(h, w)?;
    let mut rng = seeded_rng(0x1a7e);
    let image = Tensor::<T>::uniform(vec![model.cfg.encoder.in_channels, h, w], 0.0, 1.0, &mut rng)?;
    for _ in 0..warmup {
        std::hint::black_box(model.infer(&image)?);
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        std::hint::black_box(model.infer(&image)?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(samples, warmup))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_conv_formulas() {
        let mut acc = Acc { layers: Vec::new() };
        acc.linear("fc".into(), 1, 10, 20);
        assert_eq!(acc.layers[0].params, 220);
        // 3×3 conv, 16→16 channels, 64×64 output
        let macs = 16 * 16 * 3 * 3 * 64 * 64;
        assert_eq!(macs, 9_437_184);
    }

    #[test]
    fn layer_entries_sum_to_totals() {
        let r = count_flops(&ModelConfig::toy(), 32, 32).unwrap();
        assert_eq!(r.params, r.layers.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.macs, r.layers.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(r.gflops, 2.0 * r.macs as f64 / 1e9);
    }

    #[test]
    fn rejects_indivisible_input() {
        assert!(count_flops(&ModelConfig::toy(), 48, 32).is_err());
    }

    #[test]
    fn latency_needs_ten_runs() {
        let m = Trans4Trans::<f32>::new(&ModelConfig::toy(), 0).unwrap();
        assert!(measure_latency(&m, 32, 32, 9, 0).is_err());
    }
}

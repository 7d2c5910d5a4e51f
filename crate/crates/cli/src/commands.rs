use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use t4t_core::checkpoint::Checkpoint;
use t4t_core::classes::{GENERAL_PALETTE, TRANS_PALETTE};
use t4t_core::config::{parse_override, parse_pairs, RunConfig};
use t4t_core::confusion::ConfusionMatrix;
use t4t_core::decision::LabelMap;
use t4t_core::features::export_stage_images;
use t4t_core::metrics::{count_flops, measure_latency};
use t4t_core::netpbm::{self, RgbImage};
use t4t_core::pipeline::{class_counts, segment};
use t4t_core::synth::{self, ClassSets, IGNORE_INDEX};
use t4t_core::train::{train as run_training, Sample};
use t4t_core::{gradcheck as gc, Model32};

use crate::Common;

/// Key/value pairs from every user-facing configuration source, in precedence order.
pub fn user_pairs(c: &Common) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        pairs.extend(parse_pairs(&text)?);
    }
    if let Some(m) = &c.model {
        pairs.push(("model".into(), m.clone()));
    }
    for s in &c.sets {
        pairs.push(parse_override(s)?);
    }
    let thresholds = [
        ("theta_obstacle_m", c.theta_obstacle_m.map(|v| v.to_string())),
        ("theta_trans", c.theta_trans.map(|v| v.to_string())),
        ("theta_walkable", c.theta_walkable.map(|v| v.to_string())),
        ("cycle_frames", c.cycle_frames.map(|v| v.to_string())),
    ];
    pairs.extend(thresholds.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Ok(pairs)
}

pub fn resolve(c: &Common) -> Result<RunConfig> {
    Ok(RunConfig::from_pairs(&user_pairs(c)?)?)
}

/// Configuration from the checkpoint's snapshot overlaid with user sources,
/// and the model with the stored weights.
pub fn load_model(c: &Common, path: &Path) -> Result<(RunConfig, Model32)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut pairs = parse_pairs(&ck.snapshot)?;
    pairs.extend(user_pairs(c)?);
    let cfg = RunConfig::from_pairs(&pairs)?;
    let mut model = Model32::new(&cfg.model, 0)?;
    ck.apply(&mut model, &cfg.model_snapshot())?;
    Ok((cfg, model))
}

pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn train(c: &Common, data: Option<PathBuf>, out: Option<PathBuf>, log: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(c)?;
    let Some(dir) = data.or_else(|| cfg.dataset_dir.clone()) else {
        bail!("no dataset: pass --data or set dataset_dir");
    };
    let scenes = synth::read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if scenes.is_empty() {
        bail!("no NNNNNN.ppm scenes in {}", dir.display());
    }
    let samples: Vec<Sample<f32>> = scenes.iter().map(|s| Sample::from_scene(s, &cfg.classes)).collect();
    let mut model = Model32::new(&cfg.model, cfg.train.seed)?;
    log::info!("training {} parameters on {} scenes", model.param_count(), samples.len());
    let mut sink = output(log.as_deref())?;
    let mut write_err = None;
    run_training(&mut model, &samples, &cfg.train, |epoch| {
        if let Err(e) = writeln!(sink, "{}", serde_json::to_string(epoch).expect("epoch logs serialise")) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing the training log");
    }
    sink.flush()?;
    let path = out.or_else(|| cfg.checkpoint.clone()).unwrap_or_else(|| PathBuf::from("t4t.ckpt"));
    Checkpoint::from_model(&model, &cfg.model_snapshot()).save(&path)?;
    log::info!("checkpoint written to {}", path.display());
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "frame".into())
}

fn to_model_indices(labels: &LabelMap, map: impl Fn(u8) -> u8) -> Vec<usize> {
    labels.data.iter().map(|&c| map(c) as usize).collect()
}

fn scores_line(head: &str, pred: &LabelMap, gt: &LabelMap, k: usize, map: impl Fn(u8) -> u8) -> Result<String> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        bail!("{head} ground truth is {}x{}, prediction {}x{}", gt.h, gt.w, pred.h, pred.w);
    }
    let mut cm = ConfusionMatrix::new(k);
    cm.add(&to_model_indices(pred, &map), &to_model_indices(gt, &map), IGNORE_INDEX as usize)?;
    let s = cm.scores();
    Ok(json!({"head": head, "pixel_accuracy": s.pixel_accuracy, "miou": s.miou, "pixels": cm.total()}).to_string())
}

pub fn infer(
    c: &Common,
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    gt_general: Option<PathBuf>,
    gt_trans: Option<PathBuf>,
) -> Result<()> {
    let (cfg, model) = load_model(c, checkpoint)?;
    let rgb = netpbm::read_ppm(image)?;
    let seg = segment(&model, &cfg.classes, &rgb)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let name = stem(image);
    netpbm::write_ppm(out.join(format!("{name}_general.ppm")), &RgbImage::from_labels(&seg.general, &GENERAL_PALETTE)?)?;
    netpbm::write_ppm(out.join(format!("{name}_trans.ppm")), &RgbImage::from_labels(&seg.trans, &TRANS_PALETTE)?)?;
    let mut stdout = io::stdout().lock();
    for count in class_counts(&seg) {
        writeln!(stdout, "{}", serde_json::to_string(&count)?)?;
    }
    let ClassSets { general, trans } = &cfg.classes;
    if let Some(p) = gt_general {
        let gt = netpbm::read_label_pgm(&p)?;
        let line = scores_line("general", &seg.general, &gt, general.len(), |c| cfg.classes.general_to_model(c))?;
        writeln!(stdout, "{line}")?;
    }
    if let Some(p) = gt_trans {
        let gt = netpbm::read_label_pgm(&p)?;
        let line = scores_line("trans", &seg.trans, &gt, trans.len(), |c| cfg.classes.trans_to_model(c))?;
        writeln!(stdout, "{line}")?;
    }
    Ok(())
}

pub fn metrics(c: &Common, input: usize, latency_runs: usize, warmup: usize, jsonl: bool, layers: bool) -> Result<()> {
    let cfg = resolve(c)?;
    let mut dual_cfg = cfg.model.clone();
    dual_cfg.dual = true;
    let single = count_flops(&dual_cfg.clone().single_head(), input, input)?;
    let mut dual = count_flops(&dual_cfg, input, input)?;
    if latency_runs > 0 {
        let model = Model32::new(&dual_cfg, 0)?;
        dual.latency = Some(measure_latency(&model, input, input, latency_runs, warmup)?);
    }
    let d_params = dual.params - single.params;
    let d_macs = dual.macs - single.macs;
    let mut stdout = io::stdout().lock();
    if jsonl {
        if layers {
            write!(stdout, "{}", dual.render_jsonl())?;
        }
        for (variant, r) in [("single", &single), ("dual", &dual)] {
            let line = json!({"variant": variant, "input": input, "params": r.params, "mparams": r.mparams(), "macs": r.macs, "gflops": r.gflops});
            writeln!(stdout, "{line}")?;
        }
        let line = json!({
            "variant": "overhead",
            "params": d_params,
            "params_pct_of_dual": 100.0 * d_params as f64 / dual.params as f64,
            "gflops": t4t_core::metrics::gflops(d_macs),
            "gflops_pct_of_single": 100.0 * d_macs as f64 / single.macs as f64,
        });
        writeln!(stdout, "{line}")?;
    } else {
        if layers {
            write!(stdout, "{}", dual.render_text())?;
        } else {
            writeln!(stdout, "# {} at {input}x{input} ({})", cfg.size, t4t_core::metrics::CONVENTION)?;
            if let Some(lat) = &dual.latency {
                writeln!(stdout, "latency {:.3} ± {:.3} ms/frame over {} runs", lat.mean_ms, lat.std_ms, lat.runs)?;
            }
        }
        writeln!(stdout, "{:<10} {:>10} {:>10}", "variant", "MParams", "GFLOPs")?;
        writeln!(stdout, "{:<10} {:>10.3} {:>10.3}", "single", single.mparams(), single.gflops)?;
        writeln!(stdout, "{:<10} {:>10.3} {:>10.3}", "dual", dual.mparams(), dual.gflops)?;
        writeln!(
            stdout,
            "dual overhead: {:.3} MParams ({:.2}% of dual), {:.3} GFLOPs ({:.2}% of single)",
            d_params as f64 / 1e6,
            100.0 * d_params as f64 / dual.params as f64,
            t4t_core::metrics::gflops(d_macs),
            100.0 * d_macs as f64 / single.macs as f64
        )?;
    }
    Ok(())
}

pub fn gradcheck(samples: usize, seed: u64) -> Result<()> {
    let mut checks = gc::op_suite(seed)?;
    checks.push(gc::model_check(seed, samples.max(1))?);
    let mut stdout = io::stdout().lock();
    let mut failed = 0;
    for r in &checks {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        writeln!(stdout, "{verdict} {:<24} entries {:>5}  max rel error {:.3e}  at {}", r.name, r.entries, r.max_rel_error, r.worst)?;
    }
    writeln!(stdout, "{} of {} checks within {:e} (step {:e})", checks.len() - failed, checks.len(), gc::TOLERANCE, gc::STEP)?;
    if failed > 0 {
        bail!("{failed} gradient checks exceeded the tolerance");
    }
    Ok(())
}

pub fn export_features(c: &Common, checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let (_, model) = load_model(c, checkpoint)?;
    let rgb = netpbm::read_ppm(image)?;
    t4t_core::encoder::check_input_dims(rgb.h, rgb.w).context("pad or crop the image to a multiple of 32")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut stdout = io::stdout().lock();
    for p in export_stage_images(&model, &rgb.to_tensor(), out)? {
        writeln!(stdout, "{}", p.display())?;
    }
    Ok(())
}

pub fn synth(c: &Common, out: &Path, count: usize, seed: u64, size: Option<usize>) -> Result<()> {
    let cfg = resolve(c)?;
    let size = size.unwrap_or(cfg.input_size);
    let (scenes, balance) = synth::generate_dataset(count, seed, size, &cfg.classes)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, s) in scenes.iter().enumerate() {
        synth::write_scene(out, i + 1, s)?;
    }
    println!("{}", serde_json::to_string(&balance)?);
    Ok(())
}

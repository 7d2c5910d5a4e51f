//! Frame replay: a decode thread feeds a bounded queue that the engine
//! thread drains, one event line per completed cycle.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;

use anyhow::{bail, Context, Result};
use t4t_core::decision::{DecisionEngine, DepthMap, LabelMap, SegFrame};
use t4t_core::netpbm::{self, RgbImage};
use t4t_core::pipeline::segment;
use t4t_core::synth::{frame_paths, list_frames};

use crate::commands::{load_model, resolve};
use crate::Common;

const QUEUE_DEPTH: usize = 4;

enum Decoded {
    Rgb { index: usize, rgb: RgbImage, depth: DepthMap },
    Labels { index: usize, general: LabelMap, trans: LabelMap, depth: DepthMap },
}

fn decode(dir: &Path, index: usize, with_labels: bool) -> Result<Option<Decoded>> {
    let [rgb_path, depth_path, general_path, trans_path] = frame_paths(dir, index);
    if !depth_path.exists() {
        log::warn!("frame {index:06}: no depth map {}, skipped", depth_path.display());
        return Ok(None);
    }
    let depth = netpbm::read_depth_pgm(&depth_path)?;
    if with_labels {
        if !general_path.exists() || !trans_path.exists() {
            log::warn!("frame {index:06}: label maps missing, skipped");
            return Ok(None);
        }
        let general = netpbm::read_label_pgm(&general_path)?;
        let trans = netpbm::read_label_pgm(&trans_path)?;
        return Ok(Some(Decoded::Labels { index, general, trans, depth }));
    }
    let rgb = netpbm::read_ppm(&rgb_path)?;
    if (rgb.h, rgb.w) != (depth.h, depth.w) {
        bail!("frame {index:06}: image {}x{} and depth {}x{} differ", rgb.h, rgb.w, depth.h, depth.w);
    }
    Ok(Some(Decoded::Rgb { index, rgb, depth }))
}

pub fn run(c: &Common, frames: &Path, checkpoint: Option<PathBuf>, log_path: Option<PathBuf>) -> Result<()> {
    let (cfg, model) = match &checkpoint {
        Some(p) => {
            let (cfg, model) = load_model(c, p)?;
            (cfg, Some(model))
        }
        None => (resolve(c)?, None),
    };
    let indices = list_frames(frames).with_context(|| format!("listing {}", frames.display()))?;
    let mut engine = DecisionEngine::new(cfg.decision.clone())?;
    let mut sink = crate::commands::output(log_path.as_deref())?;

    let with_labels = model.is_none();
    let dir = frames.to_path_buf();
    let (tx, rx) = sync_channel::<Result<Decoded>>(QUEUE_DEPTH);
    let decoder = thread::spawn(move || {
        for index in indices {
            match decode(&dir, index, with_labels) {
                Ok(None) => continue,
                Ok(Some(d)) => {
                    if tx.send(Ok(d)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            }
        }
    });

    let mut emit = |rec: Option<t4t_core::EventRecord>| -> Result<()> {
        if let Some(rec) = rec {
            writeln!(sink, "{}", rec.to_json_line())?;
        }
        Ok(())
    };
    for msg in rx {
        let frame = match msg? {
            Decoded::Labels { index, general, trans, depth } => {
                SegFrame::new(general, trans, depth).with_context(|| format!("frame {index:06}"))?
            }
            Decoded::Rgb { index, rgb, depth } => {
                let model = model.as_ref().expect("rgb frames are decoded only with a model");
                let seg = segment(model, &cfg.classes, &rgb).with_context(|| format!("frame {index:06}"))?;
                SegFrame::new(seg.general, seg.trans, depth)?
            }
        };
        emit(engine.push(frame)?)?;
    }
    decoder.join().map_err(|_| anyhow::anyhow!("frame decoder panicked"))?;
    emit(engine.flush()?)?;
    drop(emit);
    sink.flush()?;
    Ok(())
}

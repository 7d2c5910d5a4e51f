//! Frame directories and binary invocation shared by the CLI test targets.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use t4t_core::classes::{GeneralClass, TransClass};
use t4t_core::decision::{DepthMap, LabelMap};
use t4t_core::netpbm::RgbImage;
use t4t_core::synth::{frame_paths, write_scene, Scene};

pub const SIZE: usize = 32;

#[derive(Clone, Copy, Debug)]
pub enum Script {
    /// Floor everywhere at 0.5 m.
    Obstacle,
    /// Glass door over a wall at 3 m.
    GlassDoor,
    /// Floor everywhere at 3 m.
    ClearFloor,
}

pub fn scripted_scene(kind: Script) -> Scene {
    let (general, trans, mm) = match kind {
        Script::Obstacle => (GeneralClass::Floor, TransClass::Background, 500),
        Script::GlassDoor => (GeneralClass::Wall, TransClass::GlassDoor, 3000),
        Script::ClearFloor => (GeneralClass::Floor, TransClass::Background, 3000),
    };
    Scene {
        rgb: RgbImage::filled(SIZE, SIZE, [90, 90, 90]),
        depth: DepthMap::filled(SIZE, SIZE, mm),
        general: LabelMap::filled(SIZE, SIZE, general as u8),
        trans: LabelMap::filled(SIZE, SIZE, trans as u8),
    }
}

/// Writes `script` as frames numbered from 1.
pub fn write_frames(dir: &Path, script: &[(Script, usize)]) -> usize {
    std::fs::create_dir_all(dir).unwrap();
    let mut index = 0;
    for &(kind, count) in script {
        let scene = scripted_scene(kind);
        for _ in 0..count {
            index += 1;
            write_scene(dir, index, &scene).unwrap();
        }
    }
    index
}

pub fn remove_depth(dir: &Path, index: usize) {
    std::fs::remove_file(&frame_paths(dir, index)[1]).unwrap();
}

pub fn t4t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t4t")).args(args).env("RUST_LOG", "warn").output().expect("t4t runs")
}

pub fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout).lines().map(str::to_string).collect()
}

/// Event kinds and targets of a replay log.
pub fn events(lines: &[String]) -> Vec<(String, Option<String>)> {
    lines
        .iter()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["kind"].as_str().unwrap().to_string(), v["class_or_direction"].as_str().map(str::to_string))
        })
        .collect()
}

/// A log line with its timing field removed.
pub fn without_timing(line: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_ms");
    v.to_string()
}

pub fn replay_labels(dir: &Path) -> Output {
    t4t(&["replay", "--frames", dir.to_str().unwrap()])
}

pub fn ev(kind: &str, target: Option<&str>) -> (String, Option<String>) {
    (kind.to_string(), target.map(str::to_string))
}

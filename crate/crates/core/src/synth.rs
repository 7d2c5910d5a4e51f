//! Deterministic toy RGB-D scenes with ground truth for both heads.
//!
//! A scene is a wall backdrop, an optional floor band along the bottom edge
//! and a list of rectangles drawn in order. Opaque rectangles paint their
//! colour; glass rectangles blend `α·object + (1−α)·under` inside a 2-pixel
//! opaque frame. Per-scene seeds come from the dataset seed through
//! SplitMix64 and drive a ChaCha8 stream, so output is identical on every
//! platform.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{GeneralClass, SceneClass, TransClass, GENERAL_PALETTE, TRANS_PALETTE};
use crate::decision::{DepthMap, LabelMap};
use crate::error::{validation_err, Error, Result};
use crate::netpbm::{self, RgbImage};
use crate::nn::seeded_rng;

pub const DEFAULT_GLASS_ALPHA: f64 = 0.25;
pub const GLASS_BORDER: usize = 2;
/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    fn on_border(&self, y: usize, x: usize, width: usize) -> bool {
        y < self.y + width || y + width >= self.y + self.h || x < self.x + width || x + width >= self.x + self.w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub label: SceneClass,
    pub rect: Rect,
    pub depth_mm: u16,
    pub color: [u8; 3],
    /// Present for glass; only transparency-table classes may be glass.
    pub glass_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub wall_color: [u8; 3],
    /// 0 leaves the backdrop without valid depth.
    pub wall_depth_mm: u16,
    pub floor_fraction: f64,
    pub floor_color: [u8; 3],
    /// Depth on the bottom row of the floor band.
    pub floor_near_mm: u16,
    /// Depth on the top row of the floor band.
    pub floor_far_mm: u16,
    /// Amplitude of seeded per-pixel colour noise on wall and floor.
    pub pixel_noise: u8,
    pub objects: Vec<PlacedObject>,
}

impl SceneSpec {
    /// Bare wall, no floor, no depth, no objects.
    pub fn empty(seed: u64, size: usize) -> Self {
        Self {
            seed,
            size,
            wall_color: GENERAL_PALETTE[GeneralClass::BACKGROUND.index()],
            wall_depth_mm: 0,
            floor_fraction: 0.0,
            floor_color: GENERAL_PALETTE[GeneralClass::Floor.index()],
            floor_near_mm: 800,
            floor_far_mm: 4000,
            pixel_noise: 0,
            objects: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 32 != 0 {
            return Err(validation_err!("scene size {} is not a positive multiple of 32", self.size));
        }
        if !(0.0..=1.0).contains(&self.floor_fraction) {
            return Err(validation_err!("floor fraction {} outside [0, 1]", self.floor_fraction));
        }
        if self.floor_fraction > 0.0 && (self.floor_near_mm == 0 || self.floor_far_mm == 0) {
            return Err(validation_err!("floor depth must be positive"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let r = o.rect;
            if r.w == 0 || r.h == 0 || r.x + r.w > self.size || r.y + r.h > self.size {
                return Err(validation_err!("object {i} rectangle {r:?} leaves the {0}x{0} frame", self.size));
            }
            if let Some(a) = o.glass_alpha {
                if !(0.0..=1.0).contains(&a) {
                    return Err(validation_err!("object {i} glass alpha {a} outside [0, 1]"));
                }
                if matches!(o.label, SceneClass::General(_)) {
                    return Err(validation_err!("object {i}: only transparency classes can be glass"));
                }
            }
        }
        Ok(())
    }

    pub fn floor_rows(&self) -> usize {
        (self.floor_fraction * self.size as f64).round() as usize
    }
}

/// Rendered frame plus ground truth. Labels use full-table indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub general: LabelMap,
    pub trans: LabelMap,
}

fn jitter<R: Rng>(rng: &mut R, c: [u8; 3], amp: u8) -> [u8; 3] {
    if amp == 0 {
        return c;
    }
    let a = amp as i16;
    c.map(|v| (v as i16 + rng.gen_range(-a..=a)).clamp(0, 255) as u8)
}

fn blend(obj: [u8; 3], under: [u8; 3], alpha: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (alpha * obj[k] as f64 + (1.0 - alpha) * under[k] as f64).round() as u8;
    }
    out
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = seeded_rng(spec.seed);
    let mut rgb = RgbImage::filled(n, n, spec.wall_color);
    let mut depth = DepthMap::filled(n, n, spec.wall_depth_mm);
    let mut general = LabelMap::filled(n, n, GeneralClass::BACKGROUND.index() as u8);
    let mut trans = LabelMap::filled(n, n, TransClass::Background.index() as u8);

    let rows = spec.floor_rows();
    let top = n - rows;
    for y in 0..n {
        let on_floor = y >= top;
        for x in 0..n {
            let base = if on_floor { spec.floor_color } else { spec.wall_color };
            rgb.set_pixel(y, x, jitter(&mut rng, base, spec.pixel_noise));
        }
        if on_floor {
            let t = if rows > 1 { (n - 1 - y) as f64 / (rows - 1) as f64 } else { 0.0 };
            let mm = spec.floor_near_mm as f64 + t * (spec.floor_far_mm as f64 - spec.floor_near_mm as f64);
            let mm = mm.round().max(1.0) as u16;
            for x in 0..n {
                depth.data[y * n + x] = mm;
                general.data[y * n + x] = GeneralClass::Floor.index() as u8;
            }
        }
    }

    for o in &spec.objects {
        let r = o.rect;
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let p = y * n + x;
                let color = match o.glass_alpha {
                    Some(a) if !r.on_border(y, x, GLASS_BORDER) => blend(o.color, rgb.pixel(y, x), a),
                    _ => o.color,
                };
                rgb.set_pixel(y, x, color);
                depth.data[p] = o.depth_mm;
                match o.label {
                    SceneClass::General(c) => {
                        general.data[p] = c.index() as u8;
                        trans.data[p] = TransClass::Background.index() as u8;
                    }
                    SceneClass::Trans(c) => trans.data[p] = c.index() as u8,
                }
            }
        }
    }
    Ok(Scene { rgb, depth, general, trans })
}

/// Classes a dataset draws from, in model label order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSets {
    pub general: Vec<GeneralClass>,
    pub trans: Vec<TransClass>,
}

impl ClassSets {
    pub fn full() -> Self {
        Self { general: GeneralClass::ALL.to_vec(), trans: TransClass::ALL.to_vec() }
    }

    /// Four classes per head for the toy configuration.
    pub fn toy() -> Self {
        Self {
            general: vec![GeneralClass::Wall, GeneralClass::Floor, GeneralClass::Table, GeneralClass::Chair],
            trans: vec![TransClass::Background, TransClass::Window, TransClass::GlassDoor, TransClass::Cup],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.general.contains(&GeneralClass::BACKGROUND) {
            return Err(validation_err!("general class set must contain {}", GeneralClass::BACKGROUND.name()));
        }
        if !self.trans.contains(&TransClass::Background) {
            return Err(validation_err!("transparency class set must contain background"));
        }
        for (i, c) in self.general.iter().enumerate() {
            if self.general[..i].contains(c) {
                return Err(validation_err!("duplicate general class {}", c.name()));
            }
        }
        for (i, c) in self.trans.iter().enumerate() {
            if self.trans[..i].contains(c) {
                return Err(validation_err!("duplicate transparency class {}", c.name()));
            }
        }
        Ok(())
    }

    /// Full-table general index to model index, or [`IGNORE_INDEX`].
    pub fn general_to_model(&self, full: u8) -> u8 {
        self.general.iter().position(|c| c.index() == full as usize).map_or(IGNORE_INDEX, |i| i as u8)
    }

    pub fn trans_to_model(&self, full: u8) -> u8 {
        self.trans.iter().position(|c| c.index() == full as usize).map_or(IGNORE_INDEX, |i| i as u8)
    }

    pub fn general_from_model(&self, i: usize) -> Option<GeneralClass> {
        self.general.get(i).copied()
    }

    pub fn trans_from_model(&self, i: usize) -> Option<TransClass> {
        self.trans.get(i).copied()
    }

    fn objects(&self) -> Vec<SceneClass> {
        let g = self.general.iter().filter(|c| **c != GeneralClass::BACKGROUND && !c.is_walkable());
        let t = self.trans.iter().filter(|c| **c != TransClass::Background);
        g.map(|&c| SceneClass::General(c)).chain(t.map(|&c| SceneClass::Trans(c))).collect()
    }
}

fn class_color(c: SceneClass) -> [u8; 3] {
    match c {
        SceneClass::General(g) => GENERAL_PALETTE[g.index()],
        SceneClass::Trans(t) => TRANS_PALETTE[t.index()],
    }
}

/// SplitMix64 finaliser of `base + index`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random layout: backdrop, a floor band when floor is in the set, and one
/// to four rectangles. Transparency classes are drawn as glass.
pub fn random_scene_spec(seed: u64, size: usize, classes: &ClassSets) -> Result<SceneSpec> {
    classes.validate()?;
    let mut rng = seeded_rng(seed);
    let mut spec = SceneSpec::empty(seed, size);
    spec.pixel_noise = 6;
    spec.wall_color = jitter(&mut rng, spec.wall_color, 10);
    spec.wall_depth_mm = rng.gen_range(3000..6000);
    if classes.general.contains(&GeneralClass::Floor) {
        spec.floor_fraction = rng.gen_range(0.15..0.45);
        spec.floor_color = jitter(&mut rng, spec.floor_color, 10);
        spec.floor_near_mm = rng.gen_range(600..1200);
        spec.floor_far_mm = rng.gen_range(3000..5000);
    }
    let pool = classes.objects();
    if pool.is_empty() {
        spec.validate()?;
        return Ok(spec);
    }
    let lo = (size / 5).max(GLASS_BORDER * 2 + 1);
    let hi = (size / 2).max(lo + 1);
    for _ in 0..rng.gen_range(1..=4) {
        let label = pool[rng.gen_range(0..pool.len())];
        let (w, h) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let rect = Rect { x: rng.gen_range(0..=size - w), y: rng.gen_range(0..=size - h), w, h };
        let glass_alpha = matches!(label, SceneClass::Trans(_)).then_some(DEFAULT_GLASS_ALPHA);
        spec.objects.push(PlacedObject {
            label,
            rect,
            depth_mm: rng.gen_range(1000..5000),
            color: jitter(&mut rng, class_color(label), 8),
            glass_alpha,
        });
    }
    spec.validate()?;
    Ok(spec)
}

/// Pixel counts per full-table class across a set of scenes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub general: BTreeMap<String, u64>,
    pub trans: BTreeMap<String, u64>,
}

impl ClassBalance {
    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let mut g = [0u64; 13];
        let mut t = [0u64; 12];
        for s in scenes {
            s.general.data.iter().for_each(|&c| g[c as usize] += 1);
            s.trans.data.iter().for_each(|&c| t[c as usize] += 1);
        }
        Self {
            general: GeneralClass::ALL.iter().map(|c| (c.name().to_string(), g[c.index()])).collect(),
            trans: TransClass::ALL.iter().map(|c| (c.name().to_string(), t[c.index()])).collect(),
        }
    }

    pub fn render(&self) -> String {
        let fmt = |m: &BTreeMap<String, u64>| m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        format!("general: {}\ntrans: {}", fmt(&self.general), fmt(&self.trans))
    }
}

pub fn generate_dataset(n: usize, seed: u64, size: usize, classes: &ClassSets) -> Result<(Vec<Scene>, ClassBalance)> {
    if n == 0 {
        return Err(validation_err!("dataset size must be at least 1"));
    }
    let scenes = (0..n as u64)
        .map(|i| random_scene_spec(derive_seed(seed, i), size, classes).and_then(|s| generate_scene(&s)))
        .collect::<Result<Vec<_>>>()?;
    let balance = ClassBalance::from_scenes(&scenes);
    log::info!("class balance over {n} scenes\n{}", balance.render());
    Ok((scenes, balance))
}

/// `dir/NNNNNN.ppm`, `NNNNNN.pgm` (depth), `NNNNNN_general.pgm`, `NNNNNN_trans.pgm`.
pub fn frame_paths(dir: &Path, index: usize) -> [PathBuf; 4] {
    let stem = format!("{index:06}");
    [
        dir.join(format!("{stem}.ppm")),
        dir.join(format!("{stem}.pgm")),
        dir.join(format!("{stem}_general.pgm")),
        dir.join(format!("{stem}_trans.pgm")),
    ]
}

pub fn write_scene(dir: &Path, index: usize, scene: &Scene) -> Result<()> {
    let [rgb, depth, general, trans] = frame_paths(dir, index);
    netpbm::write_ppm(rgb, &scene.rgb)?;
    netpbm::write_depth_pgm(depth, &scene.depth)?;
    netpbm::write_label_pgm(general, &scene.general)?;
    netpbm::write_label_pgm(trans, &scene.trans)
}

/// Sorted indices of `NNNNNN.ppm` files in `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<usize>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".ppm")) else { continue };
        if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
            out.push(stem.parse().expect("six ascii digits"));
        }
    }
    out.sort_unstable();
    Ok(out)
}

pub fn read_scene(dir: &Path, index: usize) -> Result<Scene> {
    let [rgb, depth, general, trans] = frame_paths(dir, index);
    let scene = Scene {
        rgb: netpbm::read_ppm(rgb)?,
        depth: netpbm::read_depth_pgm(depth)?,
        general: netpbm::read_label_pgm(general)?,
        trans: netpbm::read_label_pgm(trans)?,
    };
    let dims = (scene.rgb.h, scene.rgb.w);
    for (what, d) in [
        ("depth", (scene.depth.h, scene.depth.w)),
        ("general", (scene.general.h, scene.general.w)),
        ("trans", (scene.trans.h, scene.trans.w)),
    ] {
        if d != dims {
            return Err(validation_err!("frame {index:06}: {what} map {d:?} does not match image {dims:?}"));
        }
    }
    Ok(scene)
}

/// Every scene listed in `dir`.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    list_frames(dir)?.into_iter().map(|i| read_scene(dir, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_is_background_without_depth() {
        let s = generate_scene(&SceneSpec::empty(1, 32)).unwrap();
        assert!(s.general.data.iter().all(|&c| c == GeneralClass::BACKGROUND.index() as u8));
        assert!(s.trans.data.iter().all(|&c| c == 0));
        assert!(s.depth.data.iter().all(|&d| d == 0));
    }

    #[test]
    fn floor_depth_grows_towards_the_horizon() {
        let mut spec = SceneSpec::empty(0, 32);
        spec.floor_fraction = 0.5;
        let s = generate_scene(&spec).unwrap();
        let col: Vec<u16> = (16..32).map(|y| s.depth.data[y * 32]).collect();
        assert_eq!(col[15], spec.floor_near_mm);
        assert_eq!(col[0], spec.floor_far_mm);
        assert!(col.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_scene(&SceneSpec::empty(0, 30)).is_err());
        let mut spec = SceneSpec::empty(0, 32);
        spec.objects.push(PlacedObject {
            label: SceneClass::General(GeneralClass::Chair),
            rect: Rect { x: 20, y: 0, w: 20, h: 4 },
            depth_mm: 1000,
            color: [0; 3],
            glass_alpha: None,
        });
        assert!(generate_scene(&spec).is_err());
        spec.objects[0].rect.x = 0;
        spec.objects[0].glass_alpha = Some(0.25);
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn toy_remap_ignores_foreign_classes() {
        let sets = ClassSets::toy();
        assert_eq!(sets.general_to_model(GeneralClass::Floor.index() as u8), 1);
        assert_eq!(sets.general_to_model(GeneralClass::Sofa.index() as u8), IGNORE_INDEX);
        assert_eq!(sets.trans_to_model(TransClass::Cup.index() as u8), 3);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_eq!(derive_seed(5, 3), derive_seed(7, 1));
    }
}

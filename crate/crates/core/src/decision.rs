//! Per-cycle feedback decisions from aggregated dual segmentations and depth.
//!
//! One cycle's frames are merged into a consensus frame (per-pixel modal
//! class, per-pixel median depth) and a fixed priority chain picks exactly
//! one event: obstacle vibration, then transparent-stuff speech, then a
//! walkable direction, then the nearest object.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classes::{GeneralClass, SceneClass, TransClass, TransGroup};
use crate::error::{config_err, dim_err, validation_err, Result};

/// Per-pixel class indices of one head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(dim_err!("label map {h}x{w} with {} entries", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        Self { h, w, data: vec![class; h * w] }
    }
}

/// Depth in millimetres; 0 marks an invalid reading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u16>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, data: Vec<u16>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(dim_err!("depth map {h}x{w} with {} entries", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, mm: u16) -> Self {
        Self { h, w, data: vec![mm; h * w] }
    }
}

/// Argmax maps of both heads plus aligned depth. Also the consensus of a cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegFrame {
    pub general: LabelMap,
    pub trans: LabelMap,
    pub depth: DepthMap,
}

impl SegFrame {
    /// Validates dimensions and class ranges.
    pub fn new(general: LabelMap, trans: LabelMap, depth: DepthMap) -> Result<Self> {
        let dims = (general.h, general.w);
        if (trans.h, trans.w) != dims || (depth.h, depth.w) != dims {
            return Err(dim_err!(
                "frame parts disagree: general {dims:?}, trans {:?}, depth {:?}",
                (trans.h, trans.w),
                (depth.h, depth.w)
            ));
        }
        if let Some(&c) = general.data.iter().find(|&&c| GeneralClass::from_index(c as usize).is_none()) {
            return Err(validation_err!("unknown general class index {c}"));
        }
        if let Some(&c) = trans.data.iter().find(|&&c| TransClass::from_index(c as usize).is_none()) {
            return Err(validation_err!("unknown transparency class index {c}"));
        }
        Ok(Self { general, trans, depth })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.general.h, self.general.w)
    }

    pub fn pixels(&self) -> usize {
        self.general.data.len()
    }
}

/// Thresholds of the priority chain and the cycle length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub theta_obstacle_m: f64,
    pub theta_trans: f64,
    pub theta_walkable: f64,
    pub cycle_frames: usize,
    pub min_valid_depth_fraction: f64,
    pub min_object_area_fraction: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            theta_obstacle_m: 1.0,
            theta_trans: 0.5,
            theta_walkable: 0.4,
            cycle_frames: 20,
            min_valid_depth_fraction: 0.10,
            min_object_area_fraction: 0.01,
        }
    }
}

/// Shortest range at which the depth sensor returns usable readings.
pub const SENSOR_MIN_RANGE_M: f64 = 0.5;

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("theta_trans", self.theta_trans),
            ("theta_walkable", self.theta_walkable),
            ("min_valid_depth_fraction", self.min_valid_depth_fraction),
            ("min_object_area_fraction", self.min_object_area_fraction),
        ];
        for (name, v) in fractions {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config_err!("{name} = {v} outside (0, 1]"));
            }
        }
        if !(self.theta_obstacle_m >= SENSOR_MIN_RANGE_M) {
            return Err(config_err!(
                "theta_obstacle_m = {} below the {SENSOR_MIN_RANGE_M} m sensor minimum",
                self.theta_obstacle_m
            ));
        }
        if self.cycle_frames == 0 {
            return Err(config_err!("cycle_frames must be at least 1"));
        }
        Ok(())
    }
}

/// The four disjoint-by-head masks the priority chain works on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMasks {
    pub path: Vec<bool>,
    pub object: Vec<bool>,
    pub stuff: Vec<bool>,
    pub thing: Vec<bool>,
}

/// Splits argmax maps into walkable path, general objects, transparent
/// stuff and transparent things. Transparency background joins neither set.
pub fn split_predictions(general: &LabelMap, trans: &LabelMap) -> Result<PartitionMasks> {
    if general.data.len() != trans.data.len() {
        return Err(dim_err!("general map has {} pixels, transparency map {}", general.data.len(), trans.data.len()));
    }
    let mut path = Vec::with_capacity(general.data.len());
    let mut object = Vec::with_capacity(general.data.len());
    for &c in &general.data {
        let class = GeneralClass::from_index(c as usize).ok_or_else(|| validation_err!("unknown general class index {c}"))?;
        path.push(class.is_walkable());
        object.push(!class.is_walkable());
    }
    let mut stuff = Vec::with_capacity(trans.data.len());
    let mut thing = Vec::with_capacity(trans.data.len());
    for &c in &trans.data {
        let class = TransClass::from_index(c as usize).ok_or_else(|| validation_err!("unknown transparency class index {c}"))?;
        stuff.push(class.group() == TransGroup::Stuff);
        thing.push(class.group() == TransGroup::Thing);
    }
    Ok(PartitionMasks { path, object, stuff, thing })
}

/// Mean of the valid readings and the fraction of valid pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthStats {
    /// `None` when no pixel is valid.
    pub mean_m: Option<f64>,
    pub valid_fraction: f64,
}

pub fn mean_depth(depth: &DepthMap) -> DepthStats {
    let (sum, count) = depth
        .data
        .iter()
        .filter(|&&d| d != 0)
        .fold((0u64, 0usize), |(s, n), &d| (s + d as u64, n + 1));
    DepthStats {
        mean_m: (count > 0).then(|| sum as f64 / count as f64 / 1000.0),
        valid_fraction: count as f64 / depth.data.len() as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Forward,
    Right,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Left => "left",
            Direction::Forward => "forward",
            Direction::Right => "right",
        })
    }
}

/// Walkable fraction of each vertical band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkableRatios {
    pub left: f64,
    pub forward: f64,
    pub right: f64,
}

impl WalkableRatios {
    /// Largest ratio and its band; forward wins ties, then left.
    pub fn best(&self) -> (Direction, f64) {
        let mut best = (Direction::Forward, self.forward);
        for (d, r) in [(Direction::Left, self.left), (Direction::Right, self.right)] {
            if r > best.1 {
                best = (d, r);
            }
        }
        best
    }
}

/// Column ranges of the left, forward and right bands of a `w`-wide frame.
/// Bands are `w/3` wide; the `w mod 3` remainder columns join the centre.
pub fn band_bounds(w: usize) -> [std::ops::Range<usize>; 3] {
    let base = w / 3;
    let mid_end = w - base;
    [0..base, base..mid_end, mid_end..w]
}

pub fn walkable_ratios(path: &[bool], h: usize, w: usize) -> Result<WalkableRatios> {
    if path.len() != h * w {
        return Err(dim_err!("mask of {} pixels for a {h}x{w} frame", path.len()));
    }
    let ratio = |cols: &std::ops::Range<usize>| {
        if cols.is_empty() {
            return 0.0;
        }
        let hits: usize = (0..h).map(|y| path[y * w + cols.start..y * w + cols.end].iter().filter(|&&b| b).count()).sum();
        hits as f64 / (h * cols.len()) as f64
    };
    let [l, f, r] = band_bounds(w);
    Ok(WalkableRatios { left: ratio(&l), forward: ratio(&f), right: ratio(&r) })
}

fn modal_class(counts: &mut [u32], values: impl Iterator<Item = u8>) -> u8 {
    counts.fill(0);
    for v in values {
        counts[v as usize] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best as u8
}

/// Per-pixel consensus of a cycle: modal class per head (ties to the lowest
/// index) and the median of valid depth readings (mean of the two middle
/// readings, rounded down, for even counts; 0 when none are valid).
pub fn aggregate_cycle(frames: &[SegFrame]) -> Result<SegFrame> {
    let first = frames.first().ok_or_else(|| validation_err!("cannot aggregate an empty cycle"))?;
    let (h, w) = first.dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != (h, w)) {
        return Err(dim_err!("cycle mixes {h}x{w} and {:?} frames", f.dims()));
    }
    if frames.len() == 1 {
        return Ok(first.clone());
    }
    let n = h * w;
    let mut general = vec![0u8; n];
    let mut trans = vec![0u8; n];
    let mut depth = vec![0u16; n];
    let mut gcounts = vec![0u32; 256];
    let mut tcounts = vec![0u32; 256];
    let mut readings = Vec::with_capacity(frames.len());
    for p in 0..n {
        general[p] = modal_class(&mut gcounts, frames.iter().map(|f| f.general.data[p]));
        trans[p] = modal_class(&mut tcounts, frames.iter().map(|f| f.trans.data[p]));
        readings.clear();
        readings.extend(frames.iter().map(|f| f.depth.data[p]).filter(|&d| d != 0));
        depth[p] = median_u16(&mut readings);
    }
    Ok(SegFrame {
        general: LabelMap { h, w, data: general },
        trans: LabelMap { h, w, data: trans },
        depth: DepthMap { h, w, data: depth },
    })
}

fn median_u16(v: &mut [u16]) -> u16 {
    if v.is_empty() {
        return 0;
    }
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        ((v[m - 1] as u32 + v[m] as u32) / 2) as u16
    }
}

/// The single feedback of a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "target")]
pub enum FeedbackKind {
    Vibration,
    StuffSpeech(TransClass),
    DirectionSpeech(Direction),
    ObjectSpeech(SceneClass),
}

impl FeedbackKind {
    pub fn label(&self) -> &'static str {
        match self {
            FeedbackKind::Vibration => "vibration",
            FeedbackKind::StuffSpeech(_) => "stuff_speech",
            FeedbackKind::DirectionSpeech(_) => "direction_speech",
            FeedbackKind::ObjectSpeech(_) => "object_speech",
        }
    }

    pub fn target(&self) -> Option<String> {
        match self {
            FeedbackKind::Vibration => None,
            FeedbackKind::StuffSpeech(c) => Some(c.name().to_string()),
            FeedbackKind::DirectionSpeech(d) => Some(d.to_string()),
            FeedbackKind::ObjectSpeech(c) => Some(c.name().to_string()),
        }
    }
}

/// A decision with the measurements that triggered it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedbackEvent {
    pub kind: FeedbackKind,
    pub mean_depth_m: Option<f64>,
    pub valid_fraction: f64,
    /// Stuff fraction, walkable ratio or object area fraction of the winner;
    /// `None` for vibration.
    pub winning_fraction: Option<f64>,
}

#[derive(Clone, Copy, Default)]
struct ClassTally {
    area: usize,
    depth_sum: u64,
    depth_count: usize,
}

/// Applies the priority chain to a consensus frame. Always yields an event.
pub fn decide(consensus: &SegFrame, cfg: &DecisionConfig) -> FeedbackEvent {
    let stats = mean_depth(&consensus.depth);
    let total = consensus.pixels() as f64;
    let event = |kind, winning_fraction| FeedbackEvent {
        kind,
        mean_depth_m: stats.mean_m,
        valid_fraction: stats.valid_fraction,
        winning_fraction,
    };

    let too_close = stats.mean_m.map_or(true, |m| m < cfg.theta_obstacle_m);
    if too_close || stats.valid_fraction < cfg.min_valid_depth_fraction {
        return event(FeedbackKind::Vibration, None);
    }

    let mut general = [ClassTally::default(); 13];
    let mut trans = [ClassTally::default(); 12];
    for p in 0..consensus.pixels() {
        let d = consensus.depth.data[p];
        for tally in [
            &mut general[consensus.general.data[p] as usize],
            &mut trans[consensus.trans.data[p] as usize],
        ] {
            tally.area += 1;
            if d != 0 {
                tally.depth_sum += d as u64;
                tally.depth_count += 1;
            }
        }
    }

    let mut stuff_best: Option<(TransClass, f64)> = None;
    for c in TransClass::STUFF {
        let frac = trans[c.index()].area as f64 / total;
        if stuff_best.map_or(true, |(b, bf)| frac > bf || (frac == bf && c.index() < b.index())) {
            stuff_best = Some((c, frac));
        }
    }
    if let Some((c, frac)) = stuff_best {
        if frac > cfg.theta_trans {
            return event(FeedbackKind::StuffSpeech(c), Some(frac));
        }
    }

    let path: Vec<bool> = consensus.general.data.iter().map(|&c| c as usize == GeneralClass::Floor.index()).collect();
    let (h, w) = consensus.dims();
    let ratios = walkable_ratios(&path, h, w).expect("consensus dims are consistent");
    let (dir, ratio) = ratios.best();
    if ratio > cfg.theta_walkable {
        return event(FeedbackKind::DirectionSpeech(dir), Some(ratio));
    }

    let candidates = GeneralClass::ALL
        .iter()
        .filter(|c| !c.is_walkable())
        .map(|&c| (SceneClass::General(c), general[c.index()]))
        .chain(TransClass::THINGS.iter().map(|&c| (SceneClass::Trans(c), trans[c.index()])))
        .filter(|(_, t)| t.area > 0);

    let mut nearest: Option<(SceneClass, f64, ClassTally)> = None;
    let mut largest: Option<(SceneClass, ClassTally)> = None;
    for (class, tally) in candidates {
        if largest.map_or(true, |(_, t)| tally.area > t.area) {
            largest = Some((class, tally));
        }
        if tally.area as f64 / total >= cfg.min_object_area_fraction && tally.depth_count > 0 {
            let mean = tally.depth_sum as f64 / tally.depth_count as f64;
            if nearest.map_or(true, |(_, m, _)| mean < m) {
                nearest = Some((class, mean, tally));
            }
        }
    }
    let (class, area) = match (nearest, largest) {
        (Some((c, _, t)), _) => (c, t.area),
        (None, Some((c, t))) => (c, t.area),
        // every pixel is floor and no transparent thing is present
        (None, None) => (SceneClass::General(GeneralClass::Floor), general[GeneralClass::Floor.index()].area),
    };
    event(FeedbackKind::ObjectSpeech(class), Some(area as f64 / total))
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub cycle_index: u64,
    pub kind: String,
    pub class_or_direction: Option<String>,
    pub mean_depth_m: Option<f64>,
    pub winning_fraction: Option<f64>,
    pub wall_time_ms: f64,
}

impl EventRecord {
    pub fn new(cycle_index: u64, ev: &FeedbackEvent, wall_time_ms: f64) -> Self {
        Self {
            cycle_index,
            kind: ev.kind.label().to_string(),
            class_or_direction: ev.kind.target(),
            mean_depth_m: ev.mean_depth_m,
            winning_fraction: ev.winning_fraction,
            wall_time_ms,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialise")
    }
}

/// Buffers frames and emits one event per completed cycle.
#[derive(Debug)]
pub struct DecisionEngine {
    cfg: DecisionConfig,
    buffer: Vec<SegFrame>,
    cycle_index: u64,
    cycle_started: Option<Instant>,
}

impl DecisionEngine {
    pub fn new(cfg: DecisionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, buffer: Vec::new(), cycle_index: 0, cycle_started: None })
    }

    pub fn config(&self) -> &DecisionConfig {
        &self.cfg
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    /// Adds a frame; returns the cycle's event once `cycle_frames` are buffered.
    pub fn push(&mut self, frame: SegFrame) -> Result<Option<EventRecord>> {
        self.cycle_started.get_or_insert_with(Instant::now);
        self.buffer.push(frame);
        if self.buffer.len() >= self.cfg.cycle_frames {
            self.fire().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Emits an event for a partial cycle, if any frames are buffered.
    pub fn flush(&mut self) -> Result<Option<EventRecord>> {
        if self.buffer.is_empty() {
            Ok(None)
        } else {
            self.fire().map(Some)
        }
    }

    fn fire(&mut self) -> Result<EventRecord> {
        let consensus = aggregate_cycle(&self.buffer)?;
        let ev = decide(&consensus, &self.cfg);
        let elapsed = self.cycle_started.take().map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3);
        let rec = EventRecord::new(self.cycle_index, &ev, elapsed);
        self.buffer.clear();
        self.cycle_index += 1;
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, g: GeneralClass, t: TransClass, mm: u16) -> SegFrame {
        SegFrame::new(
            LabelMap::filled(h, w, g.index() as u8),
            LabelMap::filled(h, w, t.index() as u8),
            DepthMap::filled(h, w, mm),
        )
        .unwrap()
    }

    #[test]
    fn mean_depth_excludes_invalid() {
        let s = mean_depth(&DepthMap::filled(4, 4, 800));
        assert_eq!(s.mean_m, Some(0.8));
        assert_eq!(s.valid_fraction, 1.0);
        let mut d = DepthMap::filled(2, 2, 2000);
        d.data[0] = 0;
        d.data[1] = 0;
        let s = mean_depth(&d);
        assert_eq!(s.mean_m, Some(2.0));
        assert_eq!(s.valid_fraction, 0.5);
    }

    #[test]
    fn ratios_for_simple_masks() {
        let all = vec![true; 6 * 9];
        let r = walkable_ratios(&all, 6, 9).unwrap();
        assert_eq!((r.left, r.forward, r.right), (1.0, 1.0, 1.0));
        let left: Vec<bool> = (0..6 * 9).map(|i| i % 9 < 3).collect();
        let r = walkable_ratios(&left, 6, 9).unwrap();
        assert_eq!((r.left, r.forward, r.right), (1.0, 0.0, 0.0));
        assert_eq!(band_bounds(10), [0..3, 3..7, 7..10]);
    }

    #[test]
    fn split_all_floor_and_all_glass_door() {
        let m = split_predictions(&LabelMap::filled(3, 3, 8), &LabelMap::filled(3, 3, 5)).unwrap();
        assert!(m.path.iter().all(|&b| b) && m.object.iter().all(|&b| !b));
        assert!(m.stuff.iter().all(|&b| b) && m.thing.iter().all(|&b| !b));
        assert!(split_predictions(&LabelMap::filled(1, 1, 13), &LabelMap::filled(1, 1, 0)).is_err());
        assert!(split_predictions(&LabelMap::filled(1, 1, 0), &LabelMap::filled(1, 1, 12)).is_err());
    }

    #[test]
    fn empty_cycle_is_rejected() {
        assert!(aggregate_cycle(&[]).is_err());
    }

    #[test]
    fn obstacle_outranks_stuff() {
        let f = frame(10, 10, GeneralClass::Wall, TransClass::GlassWall, 800);
        let ev = decide(&f, &DecisionConfig::default());
        assert_eq!(ev.kind, FeedbackKind::Vibration);
    }

    #[test]
    fn config_rejects_out_of_range() {
        let cfg = DecisionConfig { theta_obstacle_m: 0.3, ..DecisionConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = DecisionConfig { theta_trans: 0.0, ..DecisionConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = DecisionConfig { cycle_frames: 0, ..DecisionConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn engine_fires_per_cycle_and_flushes() {
        let cfg = DecisionConfig { cycle_frames: 3, ..DecisionConfig::default() };
        let mut eng = DecisionEngine::new(cfg).unwrap();
        let f = frame(4, 4, GeneralClass::Wall, TransClass::Background, 500);
        let mut events = Vec::new();
        for _ in 0..7 {
            events.extend(eng.push(f.clone()).unwrap());
        }
        events.extend(eng.flush().unwrap());
        assert_eq!(events.len(), 3);
        assert_eq!(events.iter().map(|e| e.cycle_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(eng.flush().unwrap().is_none());
    }
}

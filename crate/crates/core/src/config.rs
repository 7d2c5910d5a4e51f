//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. The `model` key selects a
//! preset; every other key then overrides one field of it, in order. Lists
//! are comma separated; an empty value clears an optional path.
//!
//! | key | meaning |
//! |-----|---------|
//! | `model` | `tiny`, `small`, `medium` or `toy` |
//! | `encoder.in_channels` | image channels |
//! | `encoder.stage_channels`, `encoder.stage_depths`, `encoder.heads`, `encoder.sr_ratios`, `encoder.ffn_expansion` | four values each |
//! | `encoder.first_patch`, `encoder.later_patch` | `kernel,stride,pad` |
//! | `encoder.base_resolution` | `H,W` the position embeddings are sized for |
//! | `tpm.embed_dim`, `tpm.heads`, `tpm.fusion`, `tpm.sr_ratios` | decoder width, heads, `sum`/`concat`, four ratios |
//! | `dual` | `true` for two heads |
//! | `general_classes`, `trans_classes` | class names in model label order |
//! | `input_size` | square training / inference size |
//! | `lr`, `poly_power`, `weight_decay`, `adam_beta1`, `adam_beta2`, `adam_eps` | optimiser |
//! | `epochs`, `batch_size`, `seed`, `head_schedule` | training loop (`joint`/`alternate`) |
//! | `theta_obstacle_m`, `theta_trans`, `theta_walkable`, `cycle_frames`, `min_valid_depth_fraction`, `min_object_area_fraction` | decision engine |
//! | `dataset_dir`, `checkpoint`, `output_dir` | paths |

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::classes::{GeneralClass, TransClass};
use crate::decision::DecisionConfig;
use crate::decoder::ModelConfig;
use crate::encoder::PatchGeometry;
use crate::error::{config_err, Error, Result};
use crate::synth::ClassSets;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModelSize {
    #[default]
    Tiny,
    Small,
    Medium,
    Toy,
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelSize::Tiny => "tiny",
            ModelSize::Small => "small",
            ModelSize::Medium => "medium",
            ModelSize::Toy => "toy",
        })
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ModelSize::Tiny),
            "small" => Ok(ModelSize::Small),
            "medium" => Ok(ModelSize::Medium),
            "toy" => Ok(ModelSize::Toy),
            other => Err(config_err!("unknown model size {other:?} (expected tiny|small|medium|toy)")),
        }
    }
}

/// Learning rate of the toy preset; the deployment rate of 1e-4 is too slow
/// for 50 epochs on 64 scenes.
pub const TOY_LR: f64 = 2e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub size: ModelSize,
    pub model: ModelConfig,
    pub classes: ClassSets,
    pub input_size: usize,
    pub train: TrainConfig,
    pub decision: DecisionConfig,
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(ModelSize::Tiny)
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s)).collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = parse_list(key, v)?;
    items.try_into().map_err(|items: Vec<usize>| config_err!("{key}: expected {N} values, got {}", items.len()))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err!("{key}: expected true|false, got {v:?}")),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn render_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn general_by_name(key: &str, name: &str) -> Result<GeneralClass> {
    GeneralClass::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| config_err!("{key}: unknown general class {name:?}"))
}

fn trans_by_name(key: &str, name: &str) -> Result<TransClass> {
    TransClass::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| config_err!("{key}: unknown transparency class {name:?}"))
}

/// Splits `key = value` lines into pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| config_err!("line {}: expected key = value", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| config_err!("override {s:?} is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn preset(size: ModelSize) -> Self {
        let (model, classes, input_size, lr, epochs) = match size {
            ModelSize::Tiny => (ModelConfig::tiny(), ClassSets::full(), 512, 1e-4, 100),
            ModelSize::Small => (ModelConfig::small(), ClassSets::full(), 512, 1e-4, 100),
            ModelSize::Medium => (ModelConfig::medium(), ClassSets::full(), 512, 1e-4, 100),
            ModelSize::Toy => (ModelConfig::toy(), ClassSets::toy(), 32, TOY_LR, 50),
        };
        Self {
            size,
            model,
            classes,
            input_size,
            train: TrainConfig { lr, epochs, ..TrainConfig::default() },
            decision: DecisionConfig::default(),
            dataset_dir: None,
            checkpoint: None,
            output_dir: None,
        }
    }

    /// Preset from the last `model` pair, then every other pair in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let size = match pairs.iter().rev().find(|(k, _)| k == "model") {
            Some((_, v)) => v.parse()?,
            None => ModelSize::default(),
        };
        let mut cfg = Self::preset(size);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "model") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Overrides one field. `model` is rejected; it selects the preset.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        let tpm = &mut self.model.tpm;
        let patch = |v: &str| -> Result<PatchGeometry> {
            let [kernel, stride, pad] = parse_array::<3>(key, v)?;
            Ok(PatchGeometry { kernel, stride, pad })
        };
        match key {
            "model" => return Err(config_err!("model selects the preset and cannot be overridden in place")),
            "encoder.in_channels" => enc.in_channels = parse_num(key, v)?,
            "encoder.stage_channels" => enc.stage_channels = parse_array(key, v)?,
            "encoder.stage_depths" => enc.stage_depths = parse_array(key, v)?,
            "encoder.heads" => enc.heads = parse_array(key, v)?,
            "encoder.sr_ratios" => enc.sr_ratios = parse_array(key, v)?,
            "encoder.ffn_expansion" => enc.ffn_expansion = parse_array(key, v)?,
            "encoder.first_patch" => enc.first_patch = patch(v)?,
            "encoder.later_patch" => enc.later_patch = patch(v)?,
            "encoder.base_resolution" => {
                let [h, w] = parse_array::<2>(key, v)?;
                enc.base_resolution = (h, w);
            }
            "tpm.embed_dim" => tpm.embed_dim = parse_num(key, v)?,
            "tpm.heads" => tpm.heads = parse_num(key, v)?,
            "tpm.fusion" => tpm.fusion = v.parse()?,
            "tpm.sr_ratios" => tpm.sr_ratios = parse_array(key, v)?,
            "dual" => self.model.dual = parse_bool(key, v)?,
            "general_classes" => {
                self.classes.general = v.split(',').map(|s| general_by_name(key, s.trim())).collect::<Result<_>>()?;
                self.model.general_classes = self.classes.general.len();
            }
            "trans_classes" => {
                self.classes.trans = v.split(',').map(|s| trans_by_name(key, s.trim())).collect::<Result<_>>()?;
                self.model.trans_classes = self.classes.trans.len();
            }
            "input_size" => self.input_size = parse_num(key, v)?,
            "lr" => self.train.lr = parse_num(key, v)?,
            "poly_power" => self.train.poly_power = parse_num(key, v)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "adam_beta1" => self.train.beta1 = parse_num(key, v)?,
            "adam_beta2" => self.train.beta2 = parse_num(key, v)?,
            "adam_eps" => self.train.eps = parse_num(key, v)?,
            "epochs" => self.train.epochs = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "head_schedule" => self.train.head_schedule = v.parse()?,
            "theta_obstacle_m" => self.decision.theta_obstacle_m = parse_num(key, v)?,
            "theta_trans" => self.decision.theta_trans = parse_num(key, v)?,
            "theta_walkable" => self.decision.theta_walkable = parse_num(key, v)?,
            "cycle_frames" => self.decision.cycle_frames = parse_num(key, v)?,
            "min_valid_depth_fraction" => self.decision.min_valid_depth_fraction = parse_num(key, v)?,
            "min_object_area_fraction" => self.decision.min_object_area_fraction = parse_num(key, v)?,
            "dataset_dir" => self.dataset_dir = parse_path(v),
            "checkpoint" => self.checkpoint = parse_path(v),
            "output_dir" => self.output_dir = parse_path(v),
            other => return Err(config_err!("unknown configuration key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.classes.validate()?;
        if self.classes.general.len() != self.model.general_classes || self.classes.trans.len() != self.model.trans_classes {
            return Err(config_err!("class lists disagree with the model's class counts"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(config_err!("input_size {} is not a positive multiple of 32", self.input_size));
        }
        self.train.validate()?;
        self.decision.validate()
    }

    /// Every key in a fixed order; `parse(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let e = &self.model.encoder;
        let t = &self.model.tpm;
        let patch = |p: &PatchGeometry| format!("{},{},{}", p.kernel, p.stride, p.pad);
        let names_g: Vec<&str> = self.classes.general.iter().map(|c| c.name()).collect();
        let names_t: Vec<&str> = self.classes.trans.iter().map(|c| c.name()).collect();
        let lines = [
            ("model", self.size.to_string()),
            ("encoder.in_channels", e.in_channels.to_string()),
            ("encoder.stage_channels", join(&e.stage_channels)),
            ("encoder.stage_depths", join(&e.stage_depths)),
            ("encoder.heads", join(&e.heads)),
            ("encoder.sr_ratios", join(&e.sr_ratios)),
            ("encoder.ffn_expansion", join(&e.ffn_expansion)),
            ("encoder.first_patch", patch(&e.first_patch)),
            ("encoder.later_patch", patch(&e.later_patch)),
            ("encoder.base_resolution", format!("{},{}", e.base_resolution.0, e.base_resolution.1)),
            ("tpm.embed_dim", t.embed_dim.to_string()),
            ("tpm.heads", t.heads.to_string()),
            ("tpm.fusion", t.fusion.to_string()),
            ("tpm.sr_ratios", join(&t.sr_ratios)),
            ("dual", self.model.dual.to_string()),
            ("general_classes", names_g.join(",")),
            ("trans_classes", names_t.join(",")),
            ("input_size", self.input_size.to_string()),
            ("lr", self.train.lr.to_string()),
            ("poly_power", self.train.poly_power.to_string()),
            ("weight_decay", self.train.weight_decay.to_string()),
            ("adam_beta1", self.train.beta1.to_string()),
            ("adam_beta2", self.train.beta2.to_string()),
            ("adam_eps", self.train.eps.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("seed", self.train.seed.to_string()),
            ("head_schedule", self.train.head_schedule.to_string()),
            ("theta_obstacle_m", self.decision.theta_obstacle_m.to_string()),
            ("theta_trans", self.decision.theta_trans.to_string()),
            ("theta_walkable", self.decision.theta_walkable.to_string()),
            ("cycle_frames", self.decision.cycle_frames.to_string()),
            ("min_valid_depth_fraction", self.decision.min_valid_depth_fraction.to_string()),
            ("min_object_area_fraction", self.decision.min_object_area_fraction.to_string()),
            ("dataset_dir", render_path(&self.dataset_dir)),
            ("checkpoint", render_path(&self.checkpoint)),
            ("output_dir", render_path(&self.output_dir)),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Architecture-only rendering stored in checkpoints.
    pub fn model_snapshot(&self) -> String {
        self.render()
            .lines()
            .filter(|l| {
                let key = l.split('=').next().unwrap_or("").trim();
                key == "model" || key.starts_with("encoder.") || key.starts_with("tpm.") || key == "dual" || key.ends_with("_classes")
            })
            .map(|l| format!("{l}\n"))
            .collect()
    }
}

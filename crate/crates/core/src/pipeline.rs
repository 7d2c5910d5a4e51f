//! Model predictions as full-table label maps.

use serde::Serialize;

use crate::classes::{GeneralClass, TransClass};
use crate::decision::LabelMap;
use crate::decoder::Trans4Trans;
use crate::encoder::check_input_dims;
use crate::error::{config_err, Error, Result};
use crate::netpbm::RgbImage;
use crate::scalar::Scalar;
use crate::synth::ClassSets;
use crate::tensor::Tensor;

/// Argmax maps of both heads in full-table class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub general: LabelMap,
    pub trans: LabelMap,
}

fn to_labels(logits: &Tensor<impl Scalar>, lookup: impl Fn(usize) -> Option<usize>) -> Result<LabelMap> {
    let (h, w) = (logits.shape()[1], logits.shape()[2]);
    let data = logits
        .argmax_channels()?
        .into_iter()
        .map(|i| lookup(i).map(|c| c as u8).ok_or_else(|| config_err!("model class {i} has no table entry")))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(h, w, data)
}

/// Runs both heads on `rgb`. A single-head model reports transparency
/// background everywhere.
pub fn segment<T: Scalar>(model: &Trans4Trans<T>, classes: &ClassSets, rgb: &RgbImage) -> Result<Segmentation> {
    check_input_dims(rgb.h, rgb.w).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{msg}; pad or crop the image to a multiple of 32")),
        other => other,
    })?;
    let logits = model.infer(&rgb.to_tensor())?;
    let general = to_labels(&logits[0], |i| classes.general_from_model(i).map(GeneralClass::index))?;
    let trans = match logits.get(1) {
        Some(t) => to_labels(t, |i| classes.trans_from_model(i).map(TransClass::index))?,
        None => LabelMap::filled(rgb.h, rgb.w, TransClass::Background.index() as u8),
    };
    Ok(Segmentation { general, trans })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClassCount {
    pub head: &'static str,
    pub class: &'static str,
    pub pixels: u64,
}

/// Pixel count of every class of both tables, in table order.
pub fn class_counts(seg: &Segmentation) -> Vec<ClassCount> {
    let mut g = [0u64; 13];
    let mut t = [0u64; 12];
    seg.general.data.iter().for_each(|&c| g[c as usize] += 1);
    seg.trans.data.iter().for_each(|&c| t[c as usize] += 1);
    let general = GeneralClass::ALL.iter().map(|c| ClassCount { head: "general", class: c.name(), pixels: g[c.index()] });
    let trans = TransClass::ALL.iter().map(|c| ClassCount { head: "trans", class: c.name(), pixels: t[c.index()] });
    general.chain(trans).collect()
}

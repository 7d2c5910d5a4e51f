//! Grayscale renderings of the per-stage decoder outputs.

use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::decoder::Trans4Trans;
use crate::error::{dim_err, Result};
use crate::netpbm::write_gray_pgm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureImage {
    pub name: String,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

/// Channel mean of a `[C, H, W]` map, min-max scaled to `0..=255`.
/// A constant map renders as mid-gray.
pub fn channel_mean_image<T: Scalar>(map: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    if map.rank() != 3 {
        return Err(dim_err!("expected a [C,H,W] map, got {:?}", map.shape()));
    }
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let n = h * w;
    let data = map.data();
    let mean: Vec<f64> = (0..n).map(|p| (0..c).map(|k| data[k * n + p].to_f64_lossy()).sum::<f64>() / c as f64).collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi - lo > 0.0 {
        mean.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    } else {
        vec![128; n]
    };
    Ok((h, w, pixels))
}

/// One image per TPM output: `general_stage1..4`, then `trans_stage1..4`.
pub fn stage_images<T: Scalar>(model: &Trans4Trans<T>, image: &Tensor<T>) -> Result<Vec<FeatureImage>> {
    let g = Graph::inference();
    let p = model.params.bind(&g);
    let x = g.constant(image.clone());
    let out = model.forward(&g, &p, &x)?;
    let mut images = Vec::new();
    for (head, name) in out.heads.iter().zip(["general", "trans"]) {
        for (i, m) in head.stage_maps.iter().enumerate() {
            let (h, w, pixels) = channel_mean_image(m.value())?;
            images.push(FeatureImage { name: format!("{name}_stage{}", i + 1), h, w, pixels });
        }
    }
    Ok(images)
}

/// Writes `<name>.pgm` for every stage image into `dir`.
pub fn export_stage_images<T: Scalar>(model: &Trans4Trans<T>, image: &Tensor<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    stage_images(model, image)?
        .into_iter()
        .map(|f| {
            let path = dir.join(format!("{}.pgm", f.name));
            write_gray_pgm(&path, f.h, f.w, &f.pixels).map(|_| path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_and_constant_maps() {
        let t = Tensor::new(vec![2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 4.0]).unwrap();
        assert_eq!(channel_mean_image(&t).unwrap().2, vec![0, 85, 255]);
        let flat = Tensor::<f64>::full(vec![1, 2, 2], 3.0).unwrap();
        assert_eq!(channel_mean_image(&flat).unwrap().2, vec![128; 4]);
    }
}

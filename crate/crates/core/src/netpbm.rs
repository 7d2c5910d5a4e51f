//! Binary netpbm I/O: P6 8-bit RGB frames, P5 8-bit label maps and P5
//! 16-bit big-endian depth maps in millimetres.
//!
//! Decoding goes through the `image` crate; its encoder has no 16-bit
//! graymap support, so all writers emit the headers directly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::PnmDecoder;
use image::DynamicImage;

use crate::decision::{DepthMap, LabelMap};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != 3 * h * w {
            return Err(dim_err!("rgb image {h}x{w} with {} bytes", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [u8; 3]) -> Self {
        Self { h, w, data: rgb.repeat(h * w) }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.w + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.h * self.w;
        let scale = T::from_f64_lossy(1.0 / 255.0);
        Tensor::from_fn(&[3, self.h, self.w], |i| {
            let (c, p) = (i / n, i % n);
            T::from_f64_lossy(self.data[3 * p + c] as f64) * scale
        })
        .expect("image dims are nonzero")
    }

    /// Paints each pixel with `palette[class]`.
    pub fn from_labels(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * labels.data.len());
        for &c in &labels.data {
            let rgb = palette
                .get(c as usize)
                .ok_or_else(|| Error::Validation(format!("class {c} has no palette entry")))?;
            data.extend_from_slice(rgb);
        }
        Ok(Self { h: labels.h, w: labels.w, data })
    }
}

fn encode(path: &Path, magic: &str, w: usize, h: usize, maxval: u16, body: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "{magic}\n{w} {h}\n{maxval}\n")
        .and_then(|_| out.write_all(body))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = PnmDecoder::new(BufReader::new(file)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    DynamicImage::from_decoder(dec).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    encode(path.as_ref(), "P6", img.w, img.h, 255, &img.data)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            RgbImage::new(h as usize, w as usize, buf.into_raw())
        }
        other => Err(Error::Format(format!("{}: expected 8-bit RGB, found {:?}", path.display(), other.color()))),
    }
}

pub fn write_label_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    encode(path.as_ref(), "P5", labels.w, labels.h, 255, &labels.data)
}

pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            LabelMap::new(h as usize, w as usize, buf.into_raw())
        }
        other => Err(Error::Format(format!("{}: expected 8-bit gray, found {:?}", path.display(), other.color()))),
    }
}

pub fn write_depth_pgm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let bytes: Vec<u8> = depth.data.iter().flat_map(|d| d.to_be_bytes()).collect();
    encode(path.as_ref(), "P5", depth.w, depth.h, 65535, &bytes)
}

pub fn read_depth_pgm(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            DepthMap::new(h as usize, w as usize, buf.into_raw())
        }
        other => Err(Error::Format(format!("{}: expected 16-bit gray, found {:?}", path.display(), other.color()))),
    }
}

/// Writes an 8-bit grayscale image, e.g. a normalised feature map.
pub fn write_gray_pgm(path: impl AsRef<Path>, h: usize, w: usize, data: &[u8]) -> Result<()> {
    if data.len() != h * w {
        return Err(dim_err!("gray image {h}x{w} with {} bytes", data.len()));
    }
    encode(path.as_ref(), "P5", w, h, 255, data)
}
